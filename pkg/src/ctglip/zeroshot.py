"""Zero-shot organ classification and abnormality detection."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .encoders import GroundedModel, TextEncoder, encode_volume, organ_pool
from .reportproc import OrganLexicon, normal_template, organ_template
from .synthdata import Manifest, describe_abnormality

NORMAL_LABEL = "normal"
ABNORMAL_LABEL = "abnormal"


class MissingOrganError(KeyError):
    pass


@dataclass(frozen=True)
class AbnormalityProbe:
    organ: str
    abnormality: str
    positive_text: str
    negative_text: str

    def __post_init__(self):
        if self.positive_text == self.negative_text:
            raise ValueError(f"probe {self.abnormality!r}: positive and negative texts are identical")

    def to_json(self) -> dict:
        return asdict(self)


def default_probes(organ_abnormalities: dict[str, Sequence[str]]) -> list[AbnormalityProbe]:
    return [
        AbnormalityProbe(organ, abn, describe_abnormality(abn, organ), normal_template(organ))
        for organ, abns in organ_abnormalities.items()
        for abn in abns
    ]


def load_probes(path) -> list[AbnormalityProbe]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise ValueError(f"{path}: probe file must be a JSON list")
    return [AbnormalityProbe(**entry) for entry in doc]


def seed_probes() -> list[AbnormalityProbe]:
    text = resources.files("ctglip.data").joinpath("probes.json").read_text(encoding="utf-8")
    return [AbnormalityProbe(**entry) for entry in json.loads(text)]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@torch.no_grad()
def embed_regions(model: GroundedModel, volume, mask) -> tuple[list[int], np.ndarray]:
    fm = encode_volume(model.encoder, volume)
    ids, Z = organ_pool(fm, mask, model.head)
    return ids, Z.double().numpy()


def assign_organs(region_embeddings: np.ndarray, text_embeddings: np.ndarray, organ_ids: Sequence[int]) -> list[int]:
    """Argmax-cosine assignment; ties resolve to the lowest organ id."""
    order = np.argsort(np.asarray(organ_ids), kind="stable")
    ids = np.asarray(organ_ids)[order]
    sims = _unit_rows(region_embeddings) @ _unit_rows(text_embeddings[order]).T
    return [int(ids[int(np.argmax(row))]) for row in sims]


def classify_organs(
    model: GroundedModel, text_encoder: TextEncoder, volume, mask, lexicon: OrganLexicon
) -> dict[int, int]:
    """Map each labelled region of ``mask`` to the closest organ template."""
    ids, Z = embed_regions(model, volume, mask)
    if not ids:
        return {}
    candidates = lexicon.ids()
    T = text_encoder.encode([organ_template(lexicon.name(i)) for i in candidates])
    return dict(zip(ids, assign_organs(Z, T, candidates)))


def probe_score(s_pos: float, s_neg: float, tau: float) -> float:
    """Two-way softmax of the positive similarity at temperature ``tau``."""
    d = (s_pos - s_neg) / tau
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


def decide(s_pos: float, s_neg: float) -> str:
    return ABNORMAL_LABEL if s_pos > s_neg else NORMAL_LABEL


def score_region(z: np.ndarray, pos: np.ndarray, neg: np.ndarray, tau: float) -> tuple[float, str]:
    z = z / np.linalg.norm(z)
    s_pos = float(z @ (pos / np.linalg.norm(pos)))
    s_neg = float(z @ (neg / np.linalg.norm(neg)))
    return probe_score(s_pos, s_neg, tau), decide(s_pos, s_neg)


def detect_abnormality(
    model: GroundedModel,
    text_encoder: TextEncoder,
    volume,
    mask,
    probe: AbnormalityProbe,
    lexicon: OrganLexicon,
    tau: float = 0.07,
) -> tuple[float, str]:
    organ_id = lexicon.id_of(probe.organ)
    ids, Z = embed_regions(model, volume, mask)
    if organ_id not in ids:
        raise MissingOrganError(f"organ {probe.organ!r} (id {organ_id}) is not present in the mask")
    pos, neg = text_encoder.encode([probe.positive_text, probe.negative_text])
    return score_region(Z[ids.index(organ_id)], pos, neg, tau)


def evaluate_organs(model, text_encoder, manifest: Manifest, lexicon: OrganLexicon) -> list[dict]:
    candidates = lexicon.ids()
    T = text_encoder.encode([organ_template(lexicon.name(i)) for i in candidates])
    rows = []
    for i, rec in enumerate(manifest.records):
        subject = manifest.load_subject(i)
        ids, Z = embed_regions(model, subject.volume, subject.mask)
        if not ids:
            continue
        for oid, pred in zip(ids, assign_organs(Z, T, candidates)):
            rows.append({"subject": rec.subject_id, "organ": oid, "predicted": pred})
    return rows


def evaluate_abnormality(
    model,
    text_encoder,
    manifest: Manifest,
    probes: Iterable[AbnormalityProbe],
    lexicon: OrganLexicon,
    tau: float = 0.07,
) -> list[dict]:
    """One row per (subject, probe) whose organ is present in the subject."""
    probes = [p for p in probes if lexicon.has_name(p.organ)]
    texts = text_encoder.encode([t for p in probes for t in (p.positive_text, p.negative_text)])
    rows = []
    for i, rec in enumerate(manifest.records):
        subject = manifest.load_subject(i)
        ids, Z = embed_regions(model, subject.volume, subject.mask)
        for j, probe in enumerate(probes):
            oid = lexicon.id_of(probe.organ)
            if oid not in ids:
                continue
            score, label = score_region(Z[ids.index(oid)], texts[2 * j], texts[2 * j + 1], tau)
            truth = int(subject.truth.abnormal.get(oid) == probe.abnormality)
            rows.append(
                {
                    "subject": rec.subject_id,
                    "organ": probe.organ,
                    "abnormality": probe.abnormality,
                    "score": score,
                    "label": label,
                    "ground_truth": truth,
                }
            )
    return rows
