"""Tri-modal mortality classifier: three encoders, late fusion.

Each modality gets its own transformer encoder stack:

* events — linear projection of the hourly grid into the model width,
  plus sinusoidal positions, then blocks; the representation is the
  first timestep after encoding;
* notes — trainable token embedding plus a learned position table,
  pad positions masked out of attention, pooled at [CLS];
* vitals — linear channel projection plus sinusoidal positions, pooled
  at the first timestep.

The three H-vectors are concatenated and passed through one
relu-hidden feed-forward layer to two class logits.

With ``bias_free=True`` every additive intercept is removed: linear
biases, layer-norm affine parameters, and the positional terms (a
position table is an intercept too — it shifts the output
independently of the input). In that configuration the attribution-mode
network is positively homogeneous, so gradient-times-input attributions
sum exactly to the logit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import fileio
from .autodiff import Tape, Tensor
from .blocks import (
    BlockConfig,
    Context,
    Linear,
    ParamStore,
    TransformerBlock,
    additive_attention_mask,
    pool_first,
    sinusoidal_positions,
)
from .errors import CheckpointError
from .records import (
    MODALITIES,
    PAD_ID,
    EventSequence,
    NoteTokens,
    VitalSigns,
    check_events,
    check_notes,
    check_vitals,
)

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Structural hyperparameters of the tri-modal network."""

    width: int = 64
    heads: int = 4
    ffn_width: int = 128
    dropout: float = 0.1
    event_blocks: int = 2
    note_blocks: int = 2
    vitals_blocks: int = 2
    event_hours: int = 24
    event_dim: int = 76
    note_len: int = 512
    vocab_size: int = 120
    vitals_steps: int = 480
    vitals_channels: int = 21
    fusion_hidden: int = 64
    bias_free: bool = False
    seed: int = 0

    def __post_init__(self):
        BlockConfig(self.width, self.heads, self.ffn_width, self.dropout)
        for name in ("event_blocks", "note_blocks", "vitals_blocks", "event_hours",
                     "event_dim", "note_len", "vitals_steps", "vitals_channels",
                     "fusion_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must cover the reserved [PAD]/[CLS]/[UNK] ids")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.width, self.heads, self.ffn_width, self.dropout)


@dataclass
class Prediction:
    """One record's classifier output."""

    logits: np.ndarray          # (2,)
    probabilities: np.ndarray   # (2,), softmax of the logits
    death_probability: float    # probabilities[1]

    def __post_init__(self):
        if abs(float(np.sum(self.probabilities)) - 1.0) > 1e-9:
            raise ValueError("class probabilities must sum to 1")
        if np.any(self.probabilities < 0.0) or np.any(self.probabilities > 1.0):
            raise ValueError("class probabilities must lie in [0, 1]")


def softmax_probabilities(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for plain numpy logits."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


class TriModalNet:
    """The full classifier. Weights live in ``self.params`` keyed by
    dotted names (``events.in_proj.w``, ``notes.embed``, ...)."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params = ParamStore()
        rng = np.random.default_rng(config.seed)
        bias = not config.bias_free
        affine = not config.bias_free
        blk = config.block_config()
        store = self.params

        self.events_proj = Linear(store, "events.in_proj", rng,
                                  config.event_dim, config.width, bias)
        self.events_blocks = [
            TransformerBlock(store, f"events.block{i}", rng, blk, bias, affine)
            for i in range(config.event_blocks)]

        store.add("notes.embed",
                  rng.normal(0.0, 0.02, size=(config.vocab_size, config.width)))
        if not config.bias_free:
            store.add("notes.pos",
                      rng.normal(0.0, 0.02, size=(config.note_len, config.width)))
        self.notes_blocks = [
            TransformerBlock(store, f"notes.block{i}", rng, blk, bias, affine)
            for i in range(config.note_blocks)]

        self.vitals_proj = Linear(store, "vitals.in_proj", rng,
                                  config.vitals_channels, config.width, bias)
        self.vitals_blocks = [
            TransformerBlock(store, f"vitals.block{i}", rng, blk, bias, affine)
            for i in range(config.vitals_blocks)]

        self.fusion_hidden = Linear(store, "fusion.hidden", rng,
                                    3 * config.width, config.fusion_hidden, bias)
        self.fusion_out = Linear(store, "fusion.out", rng,
                                 config.fusion_hidden, 2, bias)

    # --- encoders ---------------------------------------------------------

    def _events_rep(self, ctx: Context, arr: np.ndarray) -> Tensor:
        arr = check_events(arr, self.config.event_dim)
        x = ctx.probe("events", ctx.tape.leaf(arr))
        h = self.events_proj.forward(ctx, x)
        if not self.config.bias_free:
            pos = sinusoidal_positions(arr.shape[1], self.config.width)
            h = ad.add(h, ctx.tape.leaf(pos, param=True))
        for block in self.events_blocks:
            h = block.forward(ctx, h, None, encoder="events")
        return pool_first(h)

    def _notes_rep(self, ctx: Context, ids: np.ndarray) -> Tensor:
        ids = check_notes(ids, self.config.vocab_size)
        length = ids.shape[1]
        if length > self.config.note_len:
            raise ValueError(f"note length {length} exceeds the position table "
                             f"({self.config.note_len})")
        emb = ad.gather_rows(ctx.param("notes.embed"), ids)
        if not self.config.bias_free:
            pos = ad.slice_(ctx.param("notes.pos"), (slice(0, length),))
            emb = ad.add(emb, pos)
        emb = ctx.probe("notes", emb)
        mask = additive_attention_mask(ctx.tape, ids != PAD_ID)
        h = emb
        for block in self.notes_blocks:
            h = block.forward(ctx, h, mask, encoder="notes")
        return pool_first(h)

    def _vitals_rep(self, ctx: Context, arr: np.ndarray) -> Tensor:
        arr = check_vitals(arr, self.config.vitals_channels)
        x = ctx.probe("vitals", ctx.tape.leaf(arr))
        h = self.vitals_proj.forward(ctx, x)
        if not self.config.bias_free:
            pos = sinusoidal_positions(arr.shape[1], self.config.width)
            h = ad.add(h, ctx.tape.leaf(pos, param=True))
        for block in self.vitals_blocks:
            h = block.forward(ctx, h, None, encoder="vitals")
        return pool_first(h)

    # --- full forward -------------------------------------------------------

    def forward(self, ctx: Context, events, notes, vitals,
                active: tuple[str, ...] = MODALITIES) -> Tensor:
        """Class logits (batch, 2). ``active`` selects which encoders run;
        the representations of inactive modalities are zeroed (the
        single-modality ablation used by the evaluation harness)."""
        for m in active:
            if m not in MODALITIES:
                raise ValueError(f"unknown modality {m!r}")
        if not active:
            raise ValueError("at least one modality must be active")
        batch = {np.asarray(events).shape[0], np.asarray(notes).shape[0],
                 np.asarray(vitals).shape[0]}
        if len(batch) != 1:
            raise ValueError(f"modality batch sizes disagree: {sorted(batch)}")
        (n,) = batch
        zeros = None
        reps = []
        for name, encode, arr in (("events", self._events_rep, events),
                                  ("notes", self._notes_rep, notes),
                                  ("vitals", self._vitals_rep, vitals)):
            if name in active:
                reps.append(encode(ctx, arr))
            else:
                if zeros is None:
                    zeros = ctx.tape.leaf(np.zeros((n, self.config.width)), param=True)
                reps.append(zeros)
        fused = ad.concat(reps, axis=-1)
        hidden = ad.relu(self.fusion_hidden.forward(ctx, fused))
        return self.fusion_out.forward(ctx, hidden)

    def predict_proba(self, events, notes, vitals, batch_size: int = 256,
                      active: tuple[str, ...] = MODALITIES) -> np.ndarray:
        """Class probabilities (n, 2), computed in inference batches."""
        n = np.asarray(events).shape[0]
        out = []
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            ctx = Context(tape=Tape(), params=self.params)
            logits = self.forward(ctx, events[start:stop], notes[start:stop],
                                  vitals[start:stop], active)
            out.append(softmax_probabilities(logits.data))
        return np.concatenate(out, axis=0)

    def predict(self, events, notes, vitals, batch_size: int = 256) -> np.ndarray:
        probs = self.predict_proba(events, notes, vitals, batch_size)
        return (probs[:, 1] >= 0.5).astype(np.int64)

    # --- single-record operations -------------------------------------------

    def encode_events(self, e, mode: str = "standard") -> np.ndarray:
        arr = e.values if isinstance(e, EventSequence) else np.asarray(e)
        ctx = Context(tape=Tape(), params=self.params, mode=mode)
        return self._events_rep(ctx, arr[None]).data[0]

    def encode_notes(self, c, mode: str = "standard") -> np.ndarray:
        ids = c.ids if isinstance(c, NoteTokens) else np.asarray(c)
        ctx = Context(tape=Tape(), params=self.params, mode=mode)
        return self._notes_rep(ctx, ids[None]).data[0]

    def encode_vitals(self, v, mode: str = "standard") -> np.ndarray:
        arr = v.values if isinstance(v, VitalSigns) else np.asarray(v)
        ctx = Context(tape=Tape(), params=self.params, mode=mode)
        return self._vitals_rep(ctx, arr[None]).data[0]

    def fuse_and_classify(self, reps, mode: str = "standard") -> Prediction:
        """Classify from three modality vectors (ablations pass zeros)."""
        vecs = [np.asarray(r, dtype=np.float64) for r in reps]
        if len(vecs) != 3 or any(v.shape != (self.config.width,) for v in vecs):
            raise ValueError(f"expected three vectors of width {self.config.width}, "
                             f"got shapes {[v.shape for v in vecs]}")
        ctx = Context(tape=Tape(), params=self.params, mode=mode)
        fused = ctx.tape.leaf(np.concatenate(vecs)[None])
        hidden = ad.relu(self.fusion_hidden.forward(ctx, fused))
        logits = self.fusion_out.forward(ctx, hidden).data[0]
        probs = softmax_probabilities(logits)
        return Prediction(logits=logits, probabilities=probs,
                          death_probability=float(probs[1]))

    def n_parameters(self) -> int:
        return self.params.n_values()


# --- persistence -------------------------------------------------------------

def save_checkpoint(model: TriModalNet, path, vocab: list[str] | None = None,
                    preprocess: dict | None = None, extra: dict | None = None) -> None:
    """Write the model (and optional vocabulary / preprocessing statistics)
    to a single checksummed container file."""
    meta = {
        "kind": "checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab": vocab,
        "preprocess": preprocess,
        "extra": extra or {},
    }
    fileio.save_container(path, dict(model.params.items()), meta)


def load_checkpoint(path) -> tuple[TriModalNet, dict]:
    """Rebuild a model from a checkpoint. Returns ``(model, meta)``.

    Any structural problem — bad magic, truncation, checksum or version
    mismatch, missing/misshapen tensors — raises :class:`CheckpointError`.
    """
    try:
        arrays, meta = fileio.load_container(path)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: container holds {meta.get('kind')!r}, "
                              "not a checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version "
                              f"{meta.get('checkpoint_version')!r} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid model config: {e}") from e
    model = TriModalNet(config)
    expected = set(model.params.names())
    stored = set(arrays)
    if expected != stored:
        missing, surplus = sorted(expected - stored), sorted(stored - expected)
        raise CheckpointError(f"{path}: tensor names disagree with the config "
                              f"(missing {missing}, unexpected {surplus})")
    for name in model.params.names():
        if arrays[name].shape != model.params[name].shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, "
                f"config expects {model.params[name].shape}")
        model.params[name] = arrays[name]
    return model, meta
