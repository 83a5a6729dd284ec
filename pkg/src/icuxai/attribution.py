"""Feature attribution for the tri-modal classifier.

The native method here is gradient x input evaluated in the model's
attribution mode, where attention probabilities and the LayerNorm
denominator are held fixed.  Under that convention the network applied
to one record is a linear map with no intercept (in the bias-free
configuration), so the element attributions of all three modalities sum
to the explained logit -- each input cell receives an additive share of
the score.  Five reference explainers ship alongside it for comparison:
seeded random scores, the last encoder block's attention row, attention
rollout, integrated gradients, and an epsilon-rule relevance propagation
that walks the recorded tape directly.

Attributions always target a pre-softmax class logit.  The softmax has
neither local linearity nor a zero intercept, so an exact decomposition
of a probability is not possible; the logit is, and the report records
the residual so the quality of the decomposition is visible.

Shapes follow the record: events (hours, features), notes one value per
token position (the sum of gradient x input over the token's embedding
vector), vitals (timesteps, channels).  All six explainers emit the same
report layout for a given record, so downstream ranking and perturbation
code does not care which method produced a report.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor, _reduce_to
from .blocks import MODES, Context, FrozenState
from .records import CLS_ID, MODALITIES, PAD_ID, MultimodalRecord

__all__ = [
    "EXPLAINER_KINDS",
    "AttributionReport",
    "Explainer",
    "aggregate_feature_attributions",
    "attention_last",
    "attention_rollout",
    "conservation_residual",
    "epsilon_lrp",
    "explain",
    "gi_attribute",
    "integrated_gradients",
    "make_explainer",
    "midpoint_alphas",
    "random_attribution",
    "relevance_propagate",
    "rollout_matrix",
]

EXPLAINER_KINDS = (
    "random",
    "attention-last",
    "attention-rollout",
    "integrated-gradients",
    "lrp-epsilon",
    "lrptrans",
)


# --- the report ----------------------------------------------------------------------

@dataclass
class AttributionReport:
    """Per-element attributions for one record and one target logit.

    ``notes`` holds one value per token position; ``note_ids`` carries the
    token ids so aggregation and perturbation can tell words from [CLS]
    and [PAD] without going back to the dataset.
    """

    record_id: str
    explainer: str
    target_class: int
    target_value: float
    events: np.ndarray     # (hours, features)
    notes: np.ndarray      # (positions,)
    vitals: np.ndarray     # (timesteps, channels)
    note_ids: np.ndarray   # (positions,) int64
    target_kind: str = "logit"

    def __post_init__(self):
        self.events = np.ascontiguousarray(self.events, dtype=np.float64)
        self.notes = np.ascontiguousarray(self.notes, dtype=np.float64)
        self.vitals = np.ascontiguousarray(self.vitals, dtype=np.float64)
        self.note_ids = np.ascontiguousarray(self.note_ids, dtype=np.int64)
        if self.events.ndim != 2 or self.vitals.ndim != 2 or self.notes.ndim != 1:
            raise ValueError("attribution arrays have the wrong rank")
        if self.note_ids.shape != self.notes.shape:
            raise ValueError("note_ids and notes lengths disagree")
        if self.target_class not in (0, 1):
            raise ValueError(f"target_class must be 0 or 1, got {self.target_class}")
        for name in ("events", "notes", "vitals"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite attributions for {name}")

    def modality_sums(self) -> dict[str, float]:
        """Total attribution per modality (exactly the element sums)."""
        return {
            "events": float(np.sum(self.events)),
            "notes": float(np.sum(self.notes)),
            "vitals": float(np.sum(self.vitals)),
        }

    @property
    def total(self) -> float:
        return float(sum(self.modality_sums().values()))

    @property
    def conservation_residual(self) -> float:
        """Target value minus the grand total of element attributions."""
        return self.target_value - self.total

    # --- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "explainer": self.explainer,
            "target_kind": self.target_kind,
            "target_class": self.target_class,
            "target_value": self.target_value,
            "events": self.events.tolist(),
            "notes": self.notes.tolist(),
            "vitals": self.vitals.tolist(),
            "note_ids": self.note_ids.tolist(),
            "modality_sums": self.modality_sums(),
            "conservation_residual": self.conservation_residual,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AttributionReport":
        return cls(
            record_id=d["record_id"],
            explainer=d["explainer"],
            target_class=int(d["target_class"]),
            target_value=float(d["target_value"]),
            events=np.array(d["events"], dtype=np.float64),
            notes=np.array(d["notes"], dtype=np.float64),
            vitals=np.array(d["vitals"], dtype=np.float64),
            note_ids=np.array(d["note_ids"], dtype=np.int64),
            target_kind=d.get("target_kind", "logit"),
        )

    @classmethod
    def from_json(cls, text: str) -> "AttributionReport":
        return cls.from_dict(json.loads(text))

    def csv_rows(self) -> list[tuple[str, int, int, float]]:
        """Flat (modality, feature_id, time_index, attribution) rows.

        The feature id of a note row is the vocabulary id of the token at
        that position; events and vitals use the column index.
        """
        rows = []
        hours, feats = self.events.shape
        for h in range(hours):
            for d in range(feats):
                rows.append(("events", d, h, float(self.events[h, d])))
        for t in range(self.notes.shape[0]):
            rows.append(("notes", int(self.note_ids[t]), t, float(self.notes[t])))
        steps, chans = self.vitals.shape
        for m in range(steps):
            for n in range(chans):
                rows.append(("vitals", n, m, float(self.vitals[m, n])))
        return rows


CSV_HEADER = ("modality", "feature_id", "time_index", "attribution")


def conservation_residual(report: AttributionReport) -> float:
    """Target value minus the sum of all element attributions."""
    return report.conservation_residual


# --- shared plumbing -----------------------------------------------------------------

def _batched(record: MultimodalRecord):
    return (record.events.values[None], record.notes.ids[None],
            record.vitals.values[None])


def _check_target_class(target_class) -> int:
    target_class = int(target_class)
    if target_class not in (0, 1):
        raise ValueError(f"target_class must be 0 or 1, got {target_class}")
    return target_class


def _probe_grad(ctx: Context, name: str) -> np.ndarray:
    probe = ctx.probes[name]
    g = probe.grad
    if g is None:
        g = np.zeros_like(probe.data)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite gradient at the {name} input")
    return g


def _build_report(record, explainer, target_class, target_value,
                  r_events, r_notes, r_vitals) -> AttributionReport:
    return AttributionReport(
        record_id=record.record_id,
        explainer=explainer,
        target_class=target_class,
        target_value=float(target_value),
        events=r_events,
        notes=r_notes,
        vitals=r_vitals,
        note_ids=record.notes.ids.copy(),
    )


def _standard_forward(model, record, capture=None):
    """One inference pass; returns the logit row and any captured maps."""
    ctx = Context(tape=Tape(), params=model.params, capture=capture)
    logits = model.forward(ctx, *_batched(record))
    return logits.data[0], ctx


# --- gradient x input ----------------------------------------------------------------

def gi_attribute(model, record: MultimodalRecord, target_class: int = 1,
                 mode: str = "attribution") -> AttributionReport:
    """Gradient x input at the three modality inputs.

    In attribution mode (the default) attention probabilities and the
    LayerNorm denominator are constants of the differentiation, which is
    what makes the decomposition additive; ``mode="standard"`` gives the
    plain gradient of the unmodified network for comparison.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    target_class = _check_target_class(target_class)
    ctx = Context(tape=Tape(), params=model.params, mode=mode)
    logits = model.forward(ctx, *_batched(record))
    target = ad.slice_(logits, (0, target_class))
    ad.backward(target)
    r_events = (ctx.probes["events"].data * _probe_grad(ctx, "events"))[0]
    r_notes = (ctx.probes["notes"].data * _probe_grad(ctx, "notes"))[0].sum(axis=-1)
    r_vitals = (ctx.probes["vitals"].data * _probe_grad(ctx, "vitals"))[0]
    name = "lrptrans" if mode == "attribution" else "gradient-input"
    return _build_report(record, name, target_class, float(target.data),
                         r_events, r_notes, r_vitals)


# --- integrated gradients ------------------------------------------------------------

def midpoint_alphas(steps: int) -> np.ndarray:
    """Midpoint-rule interpolation factors (s - 0.5) / steps for s = 1..steps.

    Their mean is exactly one half for every step count, which is what
    makes the Riemann sum complete (sum of attributions equal to the
    output change) on functions with constant curvature.
    """
    steps = int(steps)
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return (np.arange(1, steps + 1) - 0.5) / steps


def integrated_gradients(model, record: MultimodalRecord, target_class: int = 1,
                         steps: int = 20) -> AttributionReport:
    """Path-integrated gradients from an all-zero baseline.

    The note baseline is the zero *embedding*, reached by scaling the
    embedded tokens rather than swapping token ids, so the same scalar
    path parameter drives all three modalities.

    The path is taken through the function the network computes *at the
    explained input*: the endpoint pass records the attention maps and
    normalizer denominators, and every interior pass replays them as
    constants. Scaling the raw inputs instead would make the path
    degenerate -- the normalizers rescale each layer back, so the whole
    output change collapses into an arbitrarily thin slice near zero
    where no quadrature can see it. On the replayed map the integral is
    well posed, and on intercept-free models it is exact at any step
    count because the pre-activation signs cannot change along a ray
    through the origin.
    """
    target_class = _check_target_class(target_class)
    arrays = _batched(record)
    # endpoint pass: records the frozen constants, the explained value,
    # and the input tensors the gradients get multiplied with
    frozen = FrozenState()
    end = Context(tape=Tape(), params=model.params, mode="attribution",
                  frozen=frozen)
    logits = model.forward(end, *arrays)
    target_value = float(logits.data[0, target_class])
    acc: dict[str, np.ndarray] = {}
    for alpha in midpoint_alphas(steps):
        ctx = Context(tape=Tape(), params=model.params, mode="attribution",
                      frozen=frozen.start_replay(), input_scale=float(alpha))
        logits = model.forward(ctx, *arrays)
        ad.backward(ad.slice_(logits, (0, target_class)))
        for m in MODALITIES:
            g = _probe_grad(ctx, m)
            acc[m] = acc[m] + g if m in acc else g
    r = {m: end.probes[m].data[0] * (acc[m][0] / steps) for m in MODALITIES}
    return _build_report(record, "integrated-gradients", target_class, target_value,
                         r["events"], r["notes"].sum(axis=-1), r["vitals"])


# --- attention readouts --------------------------------------------------------------

def _head_mean_maps(ctx: Context) -> dict[str, list[np.ndarray]]:
    maps = {}
    for m in MODALITIES:
        if m not in ctx.capture:
            raise RuntimeError(f"no attention maps captured for {m}")
        maps[m] = [block_p[0] for block_p in ctx.capture[m]]  # (heads, L, L) each
    return maps


def attention_last(model, record: MultimodalRecord,
                   target_class: int = 1) -> AttributionReport:
    """Head-averaged attention of the final block, read at the pooled row.

    Every position gets the weight the pooled (first) position paid to
    it; for events and vitals that weight is broadcast across the feature
    columns so the report shape matches the gradient methods.
    """
    target_class = _check_target_class(target_class)
    logits, ctx = _standard_forward(model, record, capture={})
    maps = _head_mean_maps(ctx)
    rows = {m: maps[m][-1].mean(axis=0)[0] for m in MODALITIES}
    return _build_report(
        record, "attention-last", target_class, logits[target_class],
        np.broadcast_to(rows["events"][:, None], record.events.values.shape).copy(),
        rows["notes"],
        np.broadcast_to(rows["vitals"][:, None], record.vitals.values.shape).copy(),
    )


def rollout_matrix(maps: list[np.ndarray]) -> np.ndarray:
    """Compose per-block attention into one position-mixing matrix.

    Each block's head-averaged map is mixed half-and-half with the
    identity (the skip connection), row-normalized, and multiplied onto
    the running product; row i of the result says how much each input
    position feeds position i after the whole stack.
    """
    if not maps:
        raise ValueError("rollout needs at least one attention map")
    width = maps[0].shape[-1]
    out = np.eye(width)
    for block_map in maps:
        a = np.asarray(block_map, dtype=np.float64)
        if a.ndim == 3:  # (heads, L, L)
            a = a.mean(axis=0)
        a = 0.5 * (a + np.eye(width))
        a = a / a.sum(axis=-1, keepdims=True)
        out = a @ out
    return out


def attention_rollout(model, record: MultimodalRecord,
                      target_class: int = 1) -> AttributionReport:
    target_class = _check_target_class(target_class)
    logits, ctx = _standard_forward(model, record, capture={})
    maps = _head_mean_maps(ctx)
    rows = {m: rollout_matrix(maps[m])[0] for m in MODALITIES}
    return _build_report(
        record, "attention-rollout", target_class, logits[target_class],
        np.broadcast_to(rows["events"][:, None], record.events.values.shape).copy(),
        rows["notes"],
        np.broadcast_to(rows["vitals"][:, None], record.vitals.values.shape).copy(),
    )


# --- random control ------------------------------------------------------------------

def random_attribution(model, record: MultimodalRecord, target_class: int = 1,
                       seed: int = 0) -> AttributionReport:
    """Uniform random scores, seeded from the record id.

    The per-record stream depends only on (seed, record id), so a rerun
    of a study reproduces the same control ranking for every record no
    matter how the cohort was batched or ordered.
    """
    target_class = _check_target_class(target_class)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    logits, _ = _standard_forward(model, record)
    rng = np.random.default_rng(
        np.random.SeedSequence((int(seed), zlib.crc32(record.record_id.encode("utf-8")))))
    return _build_report(
        record, "random", target_class, logits[target_class],
        rng.random(record.events.values.shape),
        rng.random(record.notes.ids.shape),
        rng.random(record.vitals.values.shape),
    )


# --- epsilon-rule relevance propagation ----------------------------------------------
#
# The walker reruns the epsilon-LRP redistribution directly on the
# recorded tape of an attribution-mode forward pass.  In that mode the
# attention probabilities and the LayerNorm denominator appear as
# constants, so every surviving operation is (piecewise) linear in the
# relevance-carrying operands and has a well-defined share rule.  Nodes
# computed purely from parameters carry no relevance; shares that would
# fall on them (biases, positional tables) are absorbed, as usual for
# the epsilon rule.

def _stabilized(z: np.ndarray, eps: float) -> np.ndarray:
    return z + np.where(z >= 0.0, eps, -eps)


def _node_constness(tape: Tape) -> list[bool]:
    const = [False] * len(tape)
    for i, node in enumerate(tape.nodes):
        if node.kind == "leaf":
            const[i] = bool(node.ctx["param"])
        elif node.kind == "detach":
            const[i] = True
        elif node.kind == "gather-rows":
            # the lookup table is a parameter, but which rows were taken
            # is input data: the result carries relevance
            const[i] = False
        else:
            const[i] = all(const[j] for j in node.inputs) if node.inputs else True
    return const


def _lrp_spread(tape: Tape, nid: int, r: np.ndarray, const: list[bool],
                eps: float) -> list[tuple[int, np.ndarray]]:
    """Split the relevance of node ``nid`` among its non-constant inputs."""
    node = tape.nodes[nid]
    kind = node.kind
    z = tape.values[nid]
    if kind in ("add", "sub"):
        a, b = node.inputs
        s = r / _stabilized(z, eps)
        out = []
        if not const[a]:
            out.append((a, tape.values[a] * s))
        if not const[b]:
            sign = -1.0 if kind == "sub" else 1.0
            out.append((b, sign * tape.values[b] * s))
        return out
    if kind == "mul":
        a, b = node.inputs
        if const[a] != const[b]:
            # a fixed factor is a mixing weight; the whole share passes through
            return [(b if const[a] else a, r)]
        raise ValueError("epsilon-LRP has no rule for a product of two "
                         "relevance-carrying operands")
    if kind == "div":
        a, b = node.inputs
        if const[b]:
            return [(a, r)]
        raise ValueError("epsilon-LRP has no rule for a relevance-carrying divisor")
    if kind == "matmul":
        a, b = node.inputs
        va, vb = tape.values[a], tape.values[b]
        s = r / _stabilized(z, eps)
        out = []
        if not const[a]:
            out.append((a, va * _reduce_to(s @ np.swapaxes(vb, -1, -2), va.shape)))
        if not const[b]:
            out.append((b, vb * _reduce_to(np.swapaxes(va, -1, -2) @ s, vb.shape)))
        return out
    if kind == "relu":
        return [(node.inputs[0], r * (z > 0.0))]
    if kind == "scale":
        return [(node.inputs[0], r)]
    if kind == "transpose":
        axes = node.ctx["axes"]
        back = np.transpose(r) if axes is None else np.transpose(r, np.argsort(axes))
        return [(node.inputs[0], back)]
    if kind == "reshape":
        return [(node.inputs[0], np.reshape(r, node.ctx["shape"]))]
    if kind == "broadcast":
        return [(node.inputs[0], _reduce_to(r, node.ctx["shape"]))]
    if kind == "slice":
        full = np.zeros(node.ctx["shape"], dtype=np.float64)
        full[node.ctx["key"]] = r
        return [(node.inputs[0], full)]
    if kind == "concat":
        axis, sizes = node.ctx["axis"], node.ctx["sizes"]
        out, offset = [], 0
        key = [slice(None)] * r.ndim
        for pid, size in zip(node.inputs, sizes):
            key[axis] = slice(offset, offset + size)
            if not const[pid]:
                out.append((pid, r[tuple(key)]))
            offset += size
        return out
    if kind in ("sum-over-axis", "mean-over-axis"):
        (a,) = node.inputs
        va = tape.values[a]
        s = r / _stabilized(z, eps)
        expanded = ad._expand_reduced(np.asarray(s), node)
        weight = va
        if kind == "mean-over-axis":
            axis = node.ctx["axis"]
            if axis is None:
                count = va.size
            else:
                axes = axis if isinstance(axis, tuple) else (axis,)
                count = int(np.prod([va.shape[ax] for ax in axes]))
            weight = va / count
        return [(a, weight * expanded)]
    if kind == "gather-rows":
        return []  # the table is a parameter; its share is absorbed
    raise ValueError(f"epsilon-LRP has no rule for primitive {kind!r}")


def relevance_propagate(target: Tensor, read_at: dict[str, Tensor],
                        eps: float = 1e-6) -> dict[str, np.ndarray]:
    """Run epsilon-rule relevance from ``target`` back down its tape.

    ``read_at`` names the nodes whose accumulated relevance is wanted
    (normally the three modality probes).  The seed relevance is the
    target's own value.
    """
    tape = target.tape
    const = _node_constness(tape)
    rel: dict[int, np.ndarray] = {
        target.node_id: np.array(tape.values[target.node_id], dtype=np.float64)}
    wanted = {t.node_id: name for name, t in read_at.items()}
    collected: dict[str, np.ndarray] = {}
    for nid in range(target.node_id, -1, -1):
        r = rel.pop(nid, None)
        if r is None:
            continue
        if nid in wanted:
            collected[wanted[nid]] = r.copy()
        node = tape.nodes[nid]
        if node.kind == "leaf":
            continue
        for j, rj in _lrp_spread(tape, nid, r, const, eps):
            rel[j] = rel[j] + rj if j in rel else rj
    for name, tensor in read_at.items():
        if name not in collected:
            collected[name] = np.zeros_like(tensor.data)
    return collected


def epsilon_lrp(model, record: MultimodalRecord, target_class: int = 1,
                eps: float = 1e-6) -> AttributionReport:
    """Epsilon-rule relevance propagation over the recorded forward tape.

    Attention maps and LayerNorm denominators act as fixed mixing
    weights (the attribution-mode forward already pins them); linear and
    relu operations redistribute by the epsilon rule with the given
    stabilizer.
    """
    target_class = _check_target_class(target_class)
    if eps <= 0:
        raise ValueError("eps must be positive")
    ctx = Context(tape=Tape(), params=model.params, mode="attribution")
    logits = model.forward(ctx, *_batched(record))
    target = ad.slice_(logits, (0, target_class))
    rel = relevance_propagate(target, dict(ctx.probes), eps=eps)
    return _build_report(
        record, "lrp-epsilon", target_class, float(target.data),
        rel["events"][0], rel["notes"][0].sum(axis=-1), rel["vitals"][0])


# --- uniform front end ---------------------------------------------------------------

class Explainer:
    """One attribution method bound to a model, with fixed options."""

    def __init__(self, kind: str, model, *, seed: int = 0, steps: int = 20,
                 eps: float = 1e-6):
        if kind not in EXPLAINER_KINDS:
            raise ValueError(
                f"unknown explainer kind {kind!r}; expected one of {EXPLAINER_KINDS}")
        self.kind = kind
        self.model = model
        self.seed = int(seed)
        self.steps = int(steps)
        self.eps = float(eps)

    def explain(self, record: MultimodalRecord,
                target_class: int = 1) -> AttributionReport:
        if self.kind == "random":
            return random_attribution(self.model, record, target_class, self.seed)
        if self.kind == "attention-last":
            return attention_last(self.model, record, target_class)
        if self.kind == "attention-rollout":
            return attention_rollout(self.model, record, target_class)
        if self.kind == "integrated-gradients":
            return integrated_gradients(self.model, record, target_class, self.steps)
        if self.kind == "lrp-epsilon":
            return epsilon_lrp(self.model, record, target_class, self.eps)
        return gi_attribute(self.model, record, target_class, mode="attribution")

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Explainer(kind={self.kind!r})"


def make_explainer(kind: str, model, **options) -> Explainer:
    return Explainer(kind, model, **options)


def explain(kind: str, model, record: MultimodalRecord, target_class: int = 1,
            **options) -> AttributionReport:
    """Dispatch one record through the named explainer."""
    return make_explainer(kind, model, **options).explain(record, target_class)


# --- cohort aggregation --------------------------------------------------------------

def aggregate_feature_attributions(reports, *, event_names=None, channel_names=None,
                                   vocab=None, min_token_count: int = 100) -> dict:
    """Mean attribution per named feature over a cohort of reports.

    Event features and vitals channels are summed over time within each
    record, then averaged across the cohort.  Note tokens are averaged
    per vocabulary type over every occurrence in the cohort, keeping
    only types seen at least ``min_token_count`` times; [PAD] and [CLS]
    positions never count (they are structure, not content).  Each
    modality's table is sorted by mean attribution, descending.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate an empty cohort")
    n_events = np.zeros(reports[0].events.shape[1])
    n_vitals = np.zeros(reports[0].vitals.shape[1])
    token_total: dict[int, float] = {}
    token_count: dict[int, int] = {}
    for rep in reports:
        if rep.events.shape[1] != n_events.shape[0] or \
                rep.vitals.shape[1] != n_vitals.shape[0]:
            raise ValueError("reports in a cohort must share feature dimensions")
        n_events += rep.events.sum(axis=0)
        n_vitals += rep.vitals.sum(axis=0)
        for tid, value in zip(rep.note_ids, rep.notes):
            tid = int(tid)
            if tid in (PAD_ID, CLS_ID):
                continue
            token_total[tid] = token_total.get(tid, 0.0) + float(value)
            token_count[tid] = token_count.get(tid, 0) + 1

    k = len(reports)
    id_to_word = {}
    if vocab:
        id_to_word = {int(i): w for w, i in vocab.items()}

    def event_name(d):
        return event_names[d] if event_names else f"event_{d}"

    def channel_name(n):
        return channel_names[n] if channel_names else f"channel_{n}"

    events_table = sorted(
        ((event_name(d), float(n_events[d] / k), k) for d in range(n_events.shape[0])),
        key=lambda row: -row[1])
    vitals_table = sorted(
        ((channel_name(n), float(n_vitals[n] / k), k) for n in range(n_vitals.shape[0])),
        key=lambda row: -row[1])
    notes_table = sorted(
        ((id_to_word.get(tid, f"token_{tid}"), token_total[tid] / token_count[tid],
          token_count[tid])
         for tid in token_total if token_count[tid] >= min_token_count),
        key=lambda row: -row[1])
    return {"events": events_table, "notes": notes_table, "vitals": vitals_table}
