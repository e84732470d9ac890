"""Experiment configuration and the end-to-end pipeline behind the command line.

A config is a flat text file with one ``key = value`` per line and ``#``
comments. Data comes either from three TSV files (``source``,
``target_train``, ``target_test``) or from the synthetic generator, whose
fields are set with ``spec.<field>`` keys; the target half is then split by
``split = train,test,val``.
"""
from __future__ import annotations

import logging
import os
import shutil
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .curriculum import CurriculumConfig, TrainingLog, pretrain_model, progressive_transfer
from .data import NormStats, SyntheticSpec, generate_synthetic, load_dataset, normalize, split
from .losses import LossWeights, MmdConfig
from .model import DcktModel, build_model
from .nn import SgdConfig
from .retrieval import RetrievalReport, evaluate

log = logging.getLogger("xmt")

MODES = ("Full", "PretrainOnly", "MediaOnly", "CorrOnly", "AllData", "RandomSelect", "NoOverlap")
_FILE_KEYS = ("source", "target_train", "target_test")


def parse_mode(name: str) -> str:
    for m in MODES:
        if m.lower() == name.strip().lower():
            return m
    raise ValueError(f"unknown mode {name!r}; expected one of {', '.join(MODES)}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs. ``seed`` drives data, initialization, selection and batching."""

    source: str | None = None
    target_train: str | None = None
    target_test: str | None = None
    spec: SyntheticSpec | None = None
    split: tuple[float, float, float] = (0.2, 0.6, 0.2)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    mmd: MmdConfig = field(default_factory=MmdConfig)
    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    hidden: int = 128
    batch_size: int = 16
    pretrain_epochs: int = 50
    mode: str = "Full"
    seed: int = 0

    def __post_init__(self):
        files = [getattr(self, k) for k in _FILE_KEYS]
        if any(files) and self.spec is not None:
            raise ValueError("config names both data files and a synthetic spec; use exactly one")
        if any(files) and not all(files):
            raise ValueError(f"file data needs all of {', '.join(_FILE_KEYS)}")
        if not any(files) and self.spec is None:
            raise ValueError("config names no data source")
        object.__setattr__(self, "mode", parse_mode(self.mode))
        if self.hidden < 1 or self.batch_size < 2 or self.pretrain_epochs < 1:
            raise ValueError("hidden must be >= 1, batch_size >= 2 and pretrain_epochs >= 1")

    @property
    def uses_files(self) -> bool:
        return self.source is not None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        spec = None if self.spec is None else replace(self.spec, seed=seed)
        return replace(self, seed=seed, spec=spec, curriculum=replace(self.curriculum, seed=seed))

    def with_mode(self, mode: str) -> "ExperimentConfig":
        return replace(self, mode=mode)

    def with_alpha(self, alpha: float) -> "ExperimentConfig":
        return replace(self, curriculum=replace(self.curriculum, alpha=alpha))

    def to_text(self) -> str:
        """Resolved config in the same ``key = value`` form that ``parse_config`` reads."""
        rows = [("mode", self.mode), ("seed", self.seed)]
        if self.uses_files:
            rows += [(k, getattr(self, k)) for k in _FILE_KEYS]
        else:
            rows += [(f"spec.{f.name}", getattr(self.spec, f.name)) for f in fields(SyntheticSpec)
                     if f.name != "seed" and getattr(self.spec, f.name) is not None]
            rows.append(("split", ",".join(map(repr, self.split))))
        c = self.curriculum
        rows += [("alpha", c.alpha), ("max_iterations", c.max_iterations),
                 ("epochs_per_iteration", c.epochs_per_iteration)]
        rows += [(f"w.{k}", v) for k, v in self.weights.as_dict().items()]
        rows += [("mmd.num_kernels", self.mmd.num_kernels), ("mmd.multiplier", self.mmd.multiplier),
                 ("mmd.bandwidth", "median" if self.mmd.bandwidth is None else self.mmd.bandwidth)]
        rows += [(k, getattr(self, k)) for k in
                 ("learning_rate", "weight_decay", "hidden", "batch_size", "pretrain_epochs")]
        return "".join(f"{k} = {v}\n" for k, v in rows)


def read_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _typed(cls, prefix: str, kv: dict[str, str], used: set[str]) -> dict:
    out = {}
    for f in fields(cls):
        key = f"{prefix}{f.name}"
        if key in kv:
            used.add(key)
            out[f.name] = _cast(kv[key], f.type, key)
    return out


def _cast(value: str, type_name, key: str):
    t = str(type_name)
    try:
        if t.startswith("int"):
            return int(value)
        if t.startswith("float"):
            return float(value)
        if t == "str":
            return value
    except ValueError:
        raise ValueError(f"config key {key}: cannot parse {value!r}") from None
    raise TypeError(f"unsupported config field type {t} for {key}")


def _int_or_none(value: str, key: str):
    try:
        return None if value.lower() == "none" else int(value)
    except ValueError:
        raise ValueError(f"config key {key}: cannot parse {value!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    kv = read_key_values(text)
    used: set[str] = set()

    def take(key, cast, default):
        if key not in kv:
            return default
        used.add(key)
        try:
            return cast(kv[key])
        except ValueError:
            raise ValueError(f"config key {key}: cannot parse {kv[key]!r}") from None

    seed = take("seed", int, 0)
    files = {k: take(k, str, None) for k in _FILE_KEYS}
    spec = None
    spec_keys = [k for k in kv if k.startswith("spec.")]
    if spec_keys or not any(files.values()):
        spec_kw = {}
        for key in spec_keys:
            name = key[len("spec."):]
            match = [f for f in fields(SyntheticSpec) if f.name == name and name != "seed"]
            if not match:
                raise ValueError(f"unknown synthetic spec field {name!r}")
            used.add(key)
            spec_kw[name] = (_int_or_none(kv[key], key) if name == "tgt_pairs_per_class"
                             else _cast(kv[key], match[0].type, key))
        spec = SyntheticSpec(seed=seed, **spec_kw)
    fractions = take("split", lambda v: tuple(float(x) for x in v.split(",")), (0.2, 0.6, 0.2))
    if len(fractions) != 3:
        raise ValueError("split needs three fractions: train,test,val")

    cur = CurriculumConfig(alpha=take("alpha", float, 0.2), max_iterations=take("max_iterations", int, 10),
                           epochs_per_iteration=take("epochs_per_iteration", int, 1), seed=seed)
    weights = LossWeights(**_typed(LossWeights, "w.", kv, used))
    bw = take("mmd.bandwidth", lambda v: None if v == "median" else float(v), None)
    mmd = MmdConfig(take("mmd.num_kernels", int, 5), take("mmd.multiplier", float, 2.0), bw)
    cfg = ExperimentConfig(
        **files, spec=spec, split=fractions, curriculum=cur, weights=weights, mmd=mmd,
        learning_rate=take("learning_rate", float, 0.01), weight_decay=take("weight_decay", float, 0.0005),
        hidden=take("hidden", int, 128), batch_size=take("batch_size", int, 16),
        pretrain_epochs=take("pretrain_epochs", int, 50), mode=take("mode", str, "Full"), seed=seed,
    )
    unknown = sorted(set(kv) - used)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# -- pipeline --------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    model: DcktModel
    log: TrainingLog
    report: RetrievalReport
    norm: NormStats


def load_data(cfg: ExperimentConfig):
    """Raw (source, target train, target test) sets for a config."""
    if cfg.uses_files:
        return tuple(load_dataset(getattr(cfg, k)) for k in _FILE_KEYS)
    src, tgt = generate_synthetic(cfg.spec)
    tr, te, _ = split(tgt, cfg.split, cfg.seed)
    return src, tr, te


def mode_weights(weights: LossWeights, mode: str) -> LossWeights:
    if mode == "MediaOnly":
        return replace(weights, mmd_corr=0.0)
    if mode == "CorrOnly":
        return replace(weights, mmd_image=0.0, mmd_text=0.0)
    return weights


_STRATEGY = {"AllData": "all", "RandomSelect": "random"}


def run_experiment(cfg: ExperimentConfig, data=None) -> ExperimentResult:
    """Run one mode end to end and evaluate on the target test split.

    ``data`` may pass pre-loaded raw ``(src, tgt_train, tgt_test)`` sets.
    """
    src, tr, te = data if data is not None else load_data(cfg)
    if src.dims != tr.dims or tr.dims != te.dims:
        raise ValueError(f"feature dims differ: source {src.dims}, target train {tr.dims}, target test {te.dims}")
    if cfg.mode == "NoOverlap":
        shared = set(src.class_names) & set(tr.class_names)
        src = src.drop_classes(shared)
        log.info("dropped %d overlapping source classes", len(shared))
    src, _ = normalize(src)
    tr, norm = normalize(tr)
    te, _ = normalize(te, norm)

    model = build_model(*src.dims, src.num_classes, tr.num_classes, cfg.hidden,
                        mode_weights(cfg.weights, cfg.mode), cfg.mmd, cfg.seed)
    sgd = SgdConfig(cfg.learning_rate, cfg.weight_decay, cfg.seed)
    if cfg.mode == "PretrainOnly":
        training_log = TrainingLog()
        pretrain_model(model, src, tr, cfg.pretrain_epochs, sgd, cfg.batch_size, cfg.seed, training_log)
    else:
        cur = replace(cfg.curriculum, seed=cfg.seed, strategy=_STRATEGY.get(cfg.mode, "consistency"))
        training_log = progressive_transfer(model, src, tr, cur, sgd, batch_size=cfg.batch_size,
                                            pretrain_epochs=cfg.pretrain_epochs)
    for rec in training_log.records:
        if rec["phase"] == "transfer":
            log.info("iteration %d: %d pairs selected, total loss %.4f", rec["iteration"], rec["selected"], rec["total"])
    report = evaluate(model, te)
    log.info("%s: target MAP %.4f", cfg.mode, report.map_average)
    return ExperimentResult(cfg, model, training_log, report, norm)


# -- artifacts -------------------------------------------------------------

@contextmanager
def atomic_dir(out):
    """Yield a scratch directory that replaces ``out`` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = out.parent / f".{out.name}.old-{os.getpid()}"
    if out.exists():
        out.rename(old)
    tmp.rename(out)
    if old.exists():
        shutil.rmtree(old)


def save_norm(stats: NormStats, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, arr in zip(NormStats._fields, stats):
            fh.write(name + "\t" + ",".join(map(repr, arr.tolist())) + "\n")


def load_norm(path) -> NormStats:
    with open(path, encoding="utf-8") as fh:
        rows = dict(line.rstrip("\n").split("\t", 1) for line in fh if line.strip())
    try:
        return NormStats(*(np.array([float(v) for v in rows[k].split(",")]) for k in NormStats._fields))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"corrupt normalization file {path}: {exc}") from exc
