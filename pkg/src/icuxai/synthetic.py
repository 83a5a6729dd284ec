"""Synthetic multimodal cohorts with planted, known-salient features.

Real ICU exports cannot ship with the code, and no real dataset comes
with ground truth about *which inputs matter*.  This generator fixes
both problems at once: every modality is standard-normal (or uniform
token) noise except for explicitly planted signals -- an event feature
pushed above a threshold in a few random hours, a marker token inserted
into the note, a short additive spike in one vitals channel -- and the
label is derived from the planting, so the set of truly relevant input
cells is known exactly.  Attribution and perturbation claims can then be
scored against that ground truth instead of eyeballed.

Two planting regimes:

* default: every positive record carries all three signals (used for
  learnability and explainer-faithfulness checks);
* complementary: each positive carries exactly one signal, a third of
  the positives per modality, so no single modality can reach tri-modal
  accuracy (used for the modality-ablation ordering check).

Label noise is one-way: a planted record's label flips to 0 with the
given rate, and clean records never flip to 1.  The marker token never
appears in background text, so its occurrences are exactly the planted
ones.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .records import CLS_ID, MODALITIES, PAD_ID, UNK_ID, MultimodalDataset

__all__ = ["SyntheticSpec", "generate_synthetic", "ground_truth_json"]

_RESERVED = max(PAD_ID, CLS_ID, UNK_ID) + 1  # lowest id usable as a word


@dataclass
class SyntheticSpec:
    """Shape, planting, and noise parameters for one synthetic cohort."""

    n_records: int = 2000
    positive_rate: float = 0.10
    noise_rate: float = 0.05
    complementary: bool = False
    # grid shapes (kept small enough for desk-scale training)
    hours: int = 24
    event_dim: int = 20
    note_len: int = 48
    vocab_size: int = 120
    vitals_steps: int = 64
    vitals_channels: int = 8
    # planted signals
    event_feature: int = 2
    event_threshold: float = 2.5
    token_id: int = 7
    vitals_channel: int = 3
    vitals_amplitude: float = 4.0

    def __post_init__(self):
        if self.n_records < 1:
            raise ValueError("n_records must be positive")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must be strictly between 0 and 1 "
                             "(planted signals need both classes)")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must be in [0, 1)")
        if self.hours < 3:
            raise ValueError("need at least 3 hours to plant an event signal")
        if not 0 <= self.event_feature < self.event_dim:
            raise ValueError("event_feature outside the event grid")
        if self.note_len < 8:
            raise ValueError("note_len must be at least 8 ([CLS] plus room "
                             "for background words and up to 3 marker tokens)")
        if not _RESERVED <= self.token_id < self.vocab_size:
            raise ValueError(f"token_id must be a word id in "
                             f"[{_RESERVED}, {self.vocab_size})")
        if self.vocab_size < _RESERVED + 2:
            raise ValueError("vocab too small for background words")
        if self.vitals_steps < 3:
            raise ValueError("need at least 3 timesteps to plant a vitals spike")
        if not 0 <= self.vitals_channel < self.vitals_channels:
            raise ValueError("vitals_channel outside the vitals grid")
        if self.vitals_amplitude <= 0 or self.event_threshold <= 0:
            raise ValueError("planted signal magnitudes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)


def _vocab(spec: SyntheticSpec) -> dict[str, int]:
    vocab = {"[PAD]": PAD_ID, "[CLS]": CLS_ID, "[UNK]": UNK_ID}
    for i in range(_RESERVED, spec.vocab_size):
        vocab[f"w{i}"] = i
    return vocab


def _background_words(rng, spec: SyntheticSpec, n: int) -> np.ndarray:
    """Uniform word ids, never the marker token."""
    ids = rng.integers(_RESERVED, spec.vocab_size - 1, size=n)
    return np.where(ids >= spec.token_id, ids + 1, ids)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0):
    """Build one cohort; returns (dataset, ground_truth).

    The ground truth dict lists every planted input as a
    (record_id, modality, index) triple -- the flat cell index for
    events/vitals, the token position for notes -- plus which records
    had their label flipped by the one-way noise.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xC0FFEE)))
    n = spec.n_records

    events = rng.normal(size=(n, spec.hours, spec.event_dim))
    vitals = rng.normal(size=(n, spec.vitals_steps, spec.vitals_channels))
    notes = np.full((n, spec.note_len), PAD_ID, dtype=np.int64)
    notes[:, 0] = CLS_ID
    max_words = spec.note_len - 1
    lengths = rng.integers(max_words // 2, max_words + 1, size=n)
    for i in range(n):
        notes[i, 1:1 + lengths[i]] = _background_words(rng, spec, lengths[i])

    planted_flag = rng.random(n) < spec.positive_rate
    ids = [f"syn-{i:05d}" for i in range(n)]
    triples: list[tuple[str, str, int]] = []

    def plant_events(i):
        k = min(int(rng.integers(3, 6)), spec.hours)  # 3..5 hours
        hours = rng.choice(spec.hours, size=k, replace=False)
        for h in sorted(int(h) for h in hours):
            events[i, h, spec.event_feature] = \
                spec.event_threshold + rng.uniform(0.5, 1.5)
            triples.append((ids[i], "events",
                            h * spec.event_dim + spec.event_feature))

    def plant_notes(i):
        k = int(rng.integers(1, 4))  # 1..3 insertions
        k = min(k, int(lengths[i]))
        positions = rng.choice(np.arange(1, 1 + lengths[i]), size=k, replace=False)
        for p in sorted(int(p) for p in positions):
            notes[i, p] = spec.token_id
            triples.append((ids[i], "notes", p))

    def plant_vitals(i):
        start = int(rng.integers(0, spec.vitals_steps - 2))
        for t in range(start, start + 3):
            vitals[i, t, spec.vitals_channel] += spec.vitals_amplitude
            triples.append((ids[i], "vitals",
                            t * spec.vitals_channels + spec.vitals_channel))

    planters = {"events": plant_events, "notes": plant_notes,
                "vitals": plant_vitals}
    assignment: dict[str, str | None] = {}
    positive_positions = np.flatnonzero(planted_flag)
    for j, i in enumerate(positive_positions):
        if spec.complementary:
            modality = MODALITIES[j % 3]
            planters[modality](int(i))
            assignment[ids[int(i)]] = modality
        else:
            for modality in MODALITIES:
                planters[modality](int(i))
            assignment[ids[int(i)]] = "all"

    labels = planted_flag.astype(np.int64)
    flip = planted_flag & (rng.random(n) < spec.noise_rate)
    labels[flip] = 0
    flipped_ids = [ids[i] for i in np.flatnonzero(flip)]

    vocab = _vocab(spec)
    id_to_word = {v: k for k, v in vocab.items()}
    meta = {
        "kind": "synthetic",
        "seed": int(seed),
        "spec": spec.to_dict(),
        "vocab": vocab,
        "event_names": [f"event_{d}" for d in range(spec.event_dim)],
        "channel_names": [f"channel_{c}" for c in range(spec.vitals_channels)],
    }
    dataset = MultimodalDataset(
        events=events, events_mask=np.ones_like(events), notes=notes,
        vitals=vitals, labels=labels, ids=ids, meta=meta)
    truth = {
        "seed": int(seed),
        "spec": spec.to_dict(),
        "signals": {
            "events": {"feature": spec.event_feature,
                       "name": f"event_{spec.event_feature}",
                       "threshold": spec.event_threshold},
            "notes": {"token_id": spec.token_id,
                      "word": id_to_word[spec.token_id]},
            "vitals": {"channel": spec.vitals_channel,
                       "name": f"channel_{spec.vitals_channel}",
                       "amplitude": spec.vitals_amplitude},
        },
        "planted": [{"record_id": r, "modality": m, "index": int(x)}
                    for r, m, x in triples],
        "planted_modality": assignment,
        "flipped": flipped_ids,
    }
    return dataset, truth


def ground_truth_json(truth: dict) -> str:
    """Canonical serialization (stable key order) of a ground-truth dict."""
    return json.dumps(truth, sort_keys=True, indent=2) + "\n"
