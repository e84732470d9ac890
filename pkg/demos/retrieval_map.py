"""
Scoring cross-media retrieval with MAP
======================================

Each image queries every text (and each text every image) by cosine
distance. A query's average precision rewards relevant items near the top;
MAP averages it over queries and the two directions.
"""

import numpy as np

from xmt.retrieval import average_precision, report_from_embeddings

# Relevance lists read left to right, best rank first.
for rel in ([1, 1, 0, 0], [1, 0, 1, 0], [0, 0, 1, 1]):
    print(rel, "AP =", round(average_precision(rel), 4))

# Three classes, two pairs each. Clean embeddings retrieve perfectly...
labels = np.array([0, 0, 1, 1, 2, 2])
clean = np.eye(3)[labels] + 0.05
print("\nclean:", report_from_embeddings(clean, clean, labels).to_text().strip().replace("\n", "; "))

# ...and noise erodes both directions.
rng = np.random.default_rng(3)
for noise in (0.3, 0.6, 1.2):
    img = clean + rng.normal(scale=noise, size=clean.shape)
    txt = clean + rng.normal(scale=noise, size=clean.shape)
    rep = report_from_embeddings(img, txt, labels)
    print(f"noise {noise}: i2t {rep.map_img_to_txt:.3f}  t2i {rep.map_txt_to_img:.3f}  avg {rep.map_average:.3f}")
