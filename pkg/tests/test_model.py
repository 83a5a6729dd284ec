"""Tri-modal model tests: shapes, invariances, ablation, persistence.

The pinned "fixture vectors" (zero events, zero vitals, [CLS]-only note,
default config, seed 0) are regression anchors: they were computed once
from a fresh implementation and guard against silent drift in
initialization order or encoder wiring.
"""

import numpy as np
import pytest

from icuxai import autodiff as ad
from icuxai import fileio
from icuxai.autodiff import Tape
from icuxai.blocks import Context
from icuxai.errors import CheckpointError, SchemaError
from icuxai.model import (
    ModelConfig,
    Prediction,
    TriModalNet,
    load_checkpoint,
    save_checkpoint,
    softmax_probabilities,
)
from icuxai.records import CLS_ID, PAD_ID, EventSequence, NoteTokens, VitalSigns

SMALL = dict(width=8, heads=2, ffn_width=16, dropout=0.0,
             event_blocks=1, note_blocks=1, vitals_blocks=1,
             event_hours=4, event_dim=5, note_len=8, vocab_size=20,
             vitals_steps=6, vitals_channels=3, fusion_hidden=8, seed=1)


@pytest.fixture(scope="module")
def small_model():
    return TriModalNet(ModelConfig(**SMALL))


def small_batch(n=3, seed=0):
    rng = np.random.default_rng(seed)
    events = rng.normal(size=(n, 4, 5))
    notes = np.full((n, 8), PAD_ID, dtype=np.int64)
    notes[:, 0] = CLS_ID
    notes[:, 1:4] = rng.integers(3, 20, size=(n, 3))
    vitals = rng.normal(size=(n, 6, 3))
    return events, notes, vitals


# --- shapes and basic contracts ----------------------------------------------

def test_forward_logit_shape_and_probability_sum(small_model):
    events, notes, vitals = small_batch()
    probs = small_model.predict_proba(events, notes, vitals)
    assert probs.shape == (3, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((probs >= 0.0) & (probs <= 1.0))


def test_encoders_return_width_vectors(small_model):
    events, notes, vitals = small_batch(1)
    assert small_model.encode_events(events[0]).shape == (8,)
    assert small_model.encode_notes(notes[0]).shape == (8,)
    assert small_model.encode_vitals(vitals[0]).shape == (8,)


def test_encoders_accept_record_dataclasses(small_model):
    events, notes, vitals = small_batch(1)
    e = EventSequence(events[0], np.ones_like(events[0]))
    n = NoteTokens(notes[0])
    v = VitalSigns(vitals[0])
    np.testing.assert_array_equal(small_model.encode_events(e),
                                  small_model.encode_events(events[0]))
    np.testing.assert_array_equal(small_model.encode_notes(n),
                                  small_model.encode_notes(notes[0]))
    np.testing.assert_array_equal(small_model.encode_vitals(v),
                                  small_model.encode_vitals(vitals[0]))


def test_events_encoder_accepts_any_positive_hour_count(small_model):
    for hours in (1, 2, 4):
        vec = small_model.encode_events(np.zeros((hours, 5)))
        assert vec.shape == (8,)


def test_zero_length_sequences_are_rejected(small_model):
    with pytest.raises(SchemaError, match="hour"):
        small_model.encode_events(np.zeros((0, 5)))
    with pytest.raises(SchemaError, match="timestep"):
        small_model.encode_vitals(np.zeros((0, 3)))


def test_unknown_token_id_is_rejected(small_model):
    ids = np.array([CLS_ID, 19, 20], dtype=np.int64)  # vocab_size = 20
    with pytest.raises(SchemaError, match="unknown token id"):
        small_model.encode_notes(ids)


def test_note_longer_than_position_table_is_rejected(small_model):
    ids = np.full(9, PAD_ID, dtype=np.int64)  # note_len = 8
    ids[0] = CLS_ID
    with pytest.raises(ValueError, match="position table"):
        small_model.encode_notes(ids)


# --- invariances ---------------------------------------------------------------

def test_appending_pads_never_changes_the_note_encoding(small_model):
    ids = np.array([CLS_ID, 5, 9], dtype=np.int64)
    padded = np.concatenate([ids, np.full(5, PAD_ID, dtype=np.int64)])
    np.testing.assert_array_equal(small_model.encode_notes(ids),
                                  small_model.encode_notes(padded))


def test_cls_only_note_encodes_to_a_valid_vector(small_model):
    vec = small_model.encode_notes(np.array([CLS_ID], dtype=np.int64))
    assert vec.shape == (8,) and np.all(np.isfinite(vec))


def test_swapping_two_distinct_hours_changes_the_event_encoding(small_model):
    events = np.zeros((4, 5))
    events[1, 2] = 3.0  # distinct content in hours 1 and 3
    swapped = events.copy()
    swapped[[1, 3]] = swapped[[3, 1]]
    a = small_model.encode_events(events)
    b = small_model.encode_events(swapped)
    assert not np.allclose(a, b)


def test_perturbing_one_vitals_cell_changes_the_encoding(small_model):
    vitals = np.random.default_rng(5).normal(size=(6, 3))
    poked = vitals.copy()
    poked[2, 1] *= 2.0
    assert not np.allclose(small_model.encode_vitals(vitals),
                           small_model.encode_vitals(poked))


def test_modes_agree_on_every_record(small_model):
    events, notes, vitals = small_batch(4, seed=7)
    outs = {}
    for mode in ("standard", "attribution"):
        ctx = Context(tape=Tape(), params=small_model.params, mode=mode)
        outs[mode] = small_model.forward(ctx, events, notes, vitals).data
    np.testing.assert_array_equal(outs["standard"], outs["attribution"])


def test_same_config_and_seed_reproduce_the_same_model(small_model):
    twin = TriModalNet(ModelConfig(**SMALL))
    events, notes, vitals = small_batch()
    np.testing.assert_array_equal(small_model.predict_proba(events, notes, vitals),
                                  twin.predict_proba(events, notes, vitals))


def test_predict_proba_is_independent_of_batch_size(small_model):
    # not bit-equal: BLAS picks different kernels for different shapes
    events, notes, vitals = small_batch(7, seed=9)
    np.testing.assert_allclose(
        small_model.predict_proba(events, notes, vitals, batch_size=2),
        small_model.predict_proba(events, notes, vitals, batch_size=256),
        rtol=1e-12)


# --- fusion and ablation ---------------------------------------------------------

def test_equal_logits_give_even_probabilities():
    model = TriModalNet(ModelConfig(**SMALL))
    model.params["fusion.out.w"] = np.zeros((8, 2))
    model.params["fusion.out.b"] = np.array([3.0, 3.0])
    pred = model.fuse_and_classify([np.ones(8), np.ones(8), np.ones(8)])
    np.testing.assert_allclose(pred.probabilities, [0.5, 0.5], atol=1e-15)


def test_zeroing_two_modalities_changes_the_prediction(small_model):
    events, notes, vitals = small_batch(1)
    reps = [small_model.encode_events(events[0]),
            small_model.encode_notes(notes[0]),
            small_model.encode_vitals(vitals[0])]
    full = small_model.fuse_and_classify(reps)
    ablated = small_model.fuse_and_classify(
        [reps[0], np.zeros(8), np.zeros(8)])
    assert full.death_probability != pytest.approx(ablated.death_probability, abs=1e-12)
    assert abs(sum(ablated.probabilities) - 1.0) < 1e-9


def test_forward_with_inactive_modalities_matches_zeroed_reps(small_model):
    events, notes, vitals = small_batch(2)
    ctx = Context(tape=Tape(), params=small_model.params)
    only_events = small_model.forward(ctx, events, notes, vitals,
                                      active=("events",)).data
    by_hand = np.stack([
        small_model.fuse_and_classify(
            [small_model.encode_events(events[i]), np.zeros(8), np.zeros(8)]).logits
        for i in range(2)])
    np.testing.assert_allclose(only_events, by_hand, atol=1e-12)


def test_forward_rejects_bad_modality_selections(small_model):
    events, notes, vitals = small_batch(1)
    ctx = Context(tape=Tape(), params=small_model.params)
    with pytest.raises(ValueError, match="unknown modality"):
        small_model.forward(ctx, events, notes, vitals, active=("labs",))
    with pytest.raises(ValueError, match="at least one"):
        small_model.forward(ctx, events, notes, vitals, active=())


def test_mismatched_batch_sizes_are_rejected(small_model):
    events, notes, vitals = small_batch(3)
    ctx = Context(tape=Tape(), params=small_model.params)
    with pytest.raises(ValueError, match="batch sizes"):
        small_model.forward(ctx, events[:2], notes, vitals)


def test_fuse_and_classify_validates_widths(small_model):
    with pytest.raises(ValueError, match="width"):
        small_model.fuse_and_classify([np.zeros(8), np.zeros(8), np.zeros(7)])


def test_prediction_invariants_are_enforced():
    with pytest.raises(ValueError, match="sum to 1"):
        Prediction(logits=np.zeros(2), probabilities=np.array([0.7, 0.7]),
                   death_probability=0.7)


def test_softmax_probabilities_handles_extreme_logits():
    probs = softmax_probabilities(np.array([[1000.0, -1000.0]]))
    np.testing.assert_allclose(probs, [[1.0, 0.0]], atol=1e-300)


# --- bias-free configuration ------------------------------------------------------

def test_bias_free_model_has_no_intercept_parameters():
    model = TriModalNet(ModelConfig(**{**SMALL, "bias_free": True}))
    names = model.params.names()
    assert not any(n.endswith((".b", ".gain", ".shift")) for n in names)
    assert "notes.pos" not in names


def test_bias_free_attributions_sum_to_the_logit():
    """In the bias-free configuration the attribution-mode network is
    positively homogeneous, so gradient-times-input over all three
    modality inputs reproduces the class-1 logit exactly."""
    model = TriModalNet(ModelConfig(**{**SMALL, "bias_free": True}))
    events, notes, vitals = small_batch(1, seed=11)
    ctx = Context(tape=Tape(), params=model.params, mode="attribution")
    logits = model.forward(ctx, events, notes, vitals)
    target = ad.slice_(logits, (0, 1))
    ad.backward(target)
    total = sum(float(np.sum(ctx.probes[m].data * ctx.probes[m].grad))
                for m in ("events", "notes", "vitals"))
    want = float(target.data)
    assert total == pytest.approx(want, abs=1e-8 * max(1.0, abs(want)))


# --- persistence -------------------------------------------------------------------

def checkpoint_round_trip(tmp_path, model, **kwargs):
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path, **kwargs)
    return path


def test_checkpoint_round_trip_is_bit_exact(tmp_path, small_model):
    events, notes, vitals = small_batch()
    before = small_model.predict_proba(events, notes, vitals)
    path = checkpoint_round_trip(tmp_path, small_model,
                                 vocab=["[PAD]", "[CLS]", "[UNK]", "fever"],
                                 preprocess={"means": [0.0]},
                                 extra={"note": "fixture"})
    loaded, meta = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.predict_proba(events, notes, vitals), before)
    assert meta["vocab"][3] == "fever"
    assert meta["preprocess"] == {"means": [0.0]}
    assert meta["extra"] == {"note": "fixture"}
    assert loaded.config == small_model.config


def test_corrupted_checkpoint_is_rejected(tmp_path, small_model):
    path = checkpoint_round_trip(tmp_path, small_model)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0x10
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_truncated_checkpoint_is_rejected(tmp_path, small_model):
    path = checkpoint_round_trip(tmp_path, small_model)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch_is_rejected(tmp_path, small_model):
    path = checkpoint_round_trip(tmp_path, small_model)
    arrays, meta = fileio.load_container(path)
    meta["checkpoint_version"] = 999
    fileio.save_container(path, arrays, meta)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_loading_a_dataset_as_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "x.bin"
    fileio.save_container(path, {"a": np.zeros(2)}, {"kind": "dataset"})
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_misshapen_tensor_is_rejected_by_name(tmp_path, small_model):
    path = checkpoint_round_trip(tmp_path, small_model)
    arrays, meta = fileio.load_container(path)
    arrays["events.in_proj.w"] = arrays["events.in_proj.w"][:-1]
    fileio.save_container(path, arrays, meta)
    with pytest.raises(CheckpointError, match="events.in_proj.w"):
        load_checkpoint(path)


def test_missing_tensor_is_rejected(tmp_path, small_model):
    path = checkpoint_round_trip(tmp_path, small_model)
    arrays, meta = fileio.load_container(path)
    del arrays["fusion.out.b"]
    fileio.save_container(path, arrays, meta)
    with pytest.raises(CheckpointError, match="fusion.out.b"):
        load_checkpoint(path)


def test_invalid_stored_config_is_rejected(tmp_path, small_model):
    path = checkpoint_round_trip(tmp_path, small_model)
    arrays, meta = fileio.load_container(path)
    meta["config"]["mystery_knob"] = 3
    fileio.save_container(path, arrays, meta)
    with pytest.raises(CheckpointError, match="config"):
        load_checkpoint(path)


def test_feature_dimension_mismatch_names_the_tensor(small_model):
    """A D=5 model fed D=4 data must fail loudly, pointing at the input
    projection whose width disagrees."""
    events, notes, vitals = small_batch()
    with pytest.raises(SchemaError, match="events.in_proj"):
        small_model.predict_proba(events[:, :, :4], notes, vitals)


# --- config validation ---------------------------------------------------------------

def test_model_config_validation():
    with pytest.raises(ValueError, match="vocab_size"):
        ModelConfig(**{**SMALL, "vocab_size": 2})
    with pytest.raises(ValueError, match="positive"):
        ModelConfig(**{**SMALL, "event_blocks": 0})
    with pytest.raises(ValueError, match="divide"):
        ModelConfig(**{**SMALL, "heads": 3})
    with pytest.raises(ValueError, match="unknown model config"):
        ModelConfig.from_dict({**SMALL, "not_a_field": 1})


# --- pinned regression fixtures ---------------------------------------------------

def test_default_model_fixture_vectors_are_stable():
    """Zero/degenerate inputs through the default configuration (seed 0)
    must keep producing the same vectors run over run."""
    model = TriModalNet(ModelConfig(seed=0))

    ev = model.encode_events(np.zeros((24, 76)))
    np.testing.assert_allclose(
        ev[:4], [-2.1511461, 0.93131004, -0.26707014, -0.23742264], atol=1e-6)
    assert float(np.linalg.norm(ev)) == pytest.approx(7.999970538778847, abs=1e-9)

    vi = model.encode_vitals(np.zeros((480, 21)))
    np.testing.assert_allclose(
        vi[:4], [-2.29905618, 0.59539735, 0.23547217, 0.03670115], atol=1e-6)
    assert float(np.linalg.norm(vi)) == pytest.approx(7.999977591044746, abs=1e-9)

    ids = np.full(16, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    no = model.encode_notes(ids)
    np.testing.assert_allclose(
        no[:4], [-0.56157283, -0.38002821, -1.10497882, 0.23473314], atol=1e-6)
