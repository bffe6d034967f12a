"""Synthetic fixtures: planted-cluster image-caption pairs and length-controlled corpora."""

from __future__ import annotations

import numpy as np

from .corpus import PairRecord, default_category_map

_FINDINGS = ["nodule", "mass", "fracture", "cyst", "effusion", "lesion", "calcification", "stenosis"]
_FINDING_CUIS = ["C0028259", "C0577559", "C0016658", "C0010709", "C0013687", "C0221198", "C0175895", "C1261287"]
_FILLER = ["arrow", "indicates", "the", "region", "with", "marked", "visible", "image", "shows", "patient",
           "follow-up", "case", "left", "right", "axial", "view", "bright", "small", "large", "area"]


def planted_clusters(n_clusters: int = 4, per_cluster: int = 8, feature_dim: int = 16, noise: float = 0.6,
                     seed: int = 0, split: str = "train") -> list:
    """Pairs whose images, captions and CUIs all carry a planted cluster id.

    Cluster ``c`` gets modality class ``c % 5`` and organ class ``c % 10`` from
    the bundled category maps, a Gaussian image-feature centre, and captions
    naming its modality and organ plus random filler words. Each record also
    carries one random finding CUI, so CUI IoU is graded within a cluster.
    """
    rng = np.random.default_rng(seed)
    mod_map, org_map = default_category_map("modality"), default_category_map("organ")
    mod_cuis = {v: k for k, v in mod_map.cui_to_class.items()}
    org_cuis = {v: k for k, v in org_map.cui_to_class.items()}
    centres = rng.normal(size=(n_clusters, feature_dim))
    records = []
    for c in range(n_clusters):
        m, o = c % len(mod_map.class_names), c % len(org_map.class_names)
        for j in range(per_cluster):
            f = int(rng.integers(len(_FINDINGS)))
            filler = list(rng.choice(_FILLER, size=int(rng.integers(3, 8))))
            words = [mod_map.class_names[m].replace(" ", "-"), "of", org_map.class_names[o].replace(" ", "-"),
                     "showing", _FINDINGS[f], *filler]
            feats = centres[c] + noise * rng.normal(size=feature_dim)
            cuis = {mod_cuis[m]: "T060", org_cuis[o]: "T023", _FINDING_CUIS[f]: "T033"}
            records.append(PairRecord(
                id=f"c{c}_{j:02d}", image_ref=tuple(np.round(feats, 6).tolist()), caption=" ".join(words),
                cuis=frozenset(cuis), semantic_types=cuis, split=split,
            ))
    return records


def cluster_of(record_id: str) -> int:
    return int(record_id.split("_")[0][1:])


def length_controlled_captions(lengths, seed: int = 0) -> list:
    """Captions of exactly the given whitespace-token lengths."""
    rng = np.random.default_rng(seed)
    return [" ".join(rng.choice(_FILLER, size=int(n))) for n in lengths]
