"""Training loop, teacher ensembles, perplexity, and checkpoints."""

import math
import warnings

import numpy as np
import pytest

from lmdistill.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from lmdistill.data import TokenStream, build_vocab, encode
from lmdistill.errors import (ConfigError, DataError, FormatError,
                              NumericError, ShapeError, TrainingError)
from lmdistill.losses import DistillLossSpec
from lmdistill.model import ModelConfig, build_model, model_forward
from lmdistill.regularization import DropoutSpec
from lmdistill.training import (EpochLog, OneHotOracle, TeacherEnsemble,
                                TrainConfig, clip_gradients, ensemble_predict,
                                perplexity, train)


def tiny_corpus(seed=7, n_lines=8, n_words=6, line_len=8):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(n_words)]
    lines = [" ".join(rng.choice(words, size=line_len)) for _ in range(n_lines)]
    vocab = build_vocab(lines, cap=20)
    return vocab, encode(lines, vocab)


def tiny_config(vocab_size, **kw):
    base = dict(vocab_size=vocab_size, embed_dim=8, lstm_layers=1,
                hidden_dim=12, bottleneck_dim=8, num_experts=2)
    base.update(kw)
    return ModelConfig(**base)


def params_of(model):
    return [p.data.copy() for _, p in model.parameters()]


# ---------------------------------------------------------------------------
# TrainConfig and EpochLog


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(grad_clip=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(asgd_trigger_patience=-1)
    with pytest.raises(ConfigError):
        TrainConfig(lr_decay_on_plateau=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_decay_on_plateau=1.5)


def test_epoch_log_line_format():
    log = EpochLog(epoch=3, train_loss=1.23456, valid_ppl=7.12345, lr=0.5)
    assert log.line() == "epoch=3 train_loss=1.234560 valid_ppl=7.123450 lr=0.5"


# ---------------------------------------------------------------------------
# Gradient clipping


def _fake_params(grads):
    from lmdistill.tensor import Tensor
    out = []
    for i, g in enumerate(grads):
        t = Tensor(np.zeros_like(np.asarray(g, dtype=float)), requires_grad=True)
        t.grad = np.asarray(g, dtype=float)
        out.append((f"p{i}", t))
    return out


def test_clip_returns_preclip_norm_and_caps():
    params = _fake_params([[3.0], [4.0]])  # global norm 5
    norm = clip_gradients(params, 1.0)
    assert norm == 5.0
    assert params[0][1].grad[0] == pytest.approx(0.6)
    assert params[1][1].grad[0] == pytest.approx(0.8)
    clipped = math.sqrt(sum(float(np.sum(p.grad ** 2)) for _, p in params))
    assert clipped == pytest.approx(1.0)


def test_clip_below_limit_is_untouched():
    params = _fake_params([[0.3], [0.4]])  # norm 0.5
    norm = clip_gradients(params, 1.0)
    assert norm == 0.5
    assert params[0][1].grad[0] == 0.3  # bitwise, no rescale applied
    assert params[1][1].grad[0] == 0.4


def test_clip_skips_missing_grads_and_validates():
    params = _fake_params([[3.0, 4.0]])
    params[0][1].grad = None
    assert clip_gradients(params, 1.0) == 0.0
    with pytest.raises(ConfigError):
        clip_gradients(params, 0.0)


# ---------------------------------------------------------------------------
# Teacher ensembles


def test_ensemble_mean_matches_manual():
    vocab, stream = tiny_corpus()
    m1 = build_model(tiny_config(vocab.size), 1)
    m2 = build_model(tiny_config(vocab.size, hidden_dim=10), 2)
    ens = TeacherEnsemble([m1, m2])
    tokens = stream.ids[None, :5]
    states = [m.init_state(1) for m in (m1, m2)]
    q, _ = ensemble_predict(ens, tokens, states)
    p1 = np.exp(model_forward(m1, tokens, m1.init_state(1)).log_probs.data)
    p2 = np.exp(model_forward(m2, tokens, m2.init_state(1)).log_probs.data)
    assert np.array_equal(q, (p1 + p2) / 2)
    assert q.shape == (5, vocab.size)
    # rows are distributions
    np.testing.assert_allclose(q.sum(axis=1), 1.0, rtol=1e-12)


def test_ensemble_carries_member_state_across_batches():
    vocab, stream = tiny_corpus()
    m1 = build_model(tiny_config(vocab.size), 1)
    m2 = build_model(tiny_config(vocab.size, hidden_dim=10), 2)
    ens = TeacherEnsemble([m1, m2])
    b1 = np.stack([stream.ids[0:4], stream.ids[8:12]])
    b2 = np.stack([stream.ids[4:8], stream.ids[12:16]])
    ens.reset_state(2)
    q1 = ens.soft_labels(b1, None)
    q2 = ens.soft_labels(b2, None)

    total1 = total2 = None
    for m in (m1, m2):
        out1 = model_forward(m, b1, m.init_state(2))
        out2 = model_forward(m, b2, out1.state)
        p1, p2 = np.exp(out1.log_probs.data), np.exp(out2.log_probs.data)
        total1 = p1 if total1 is None else total1 + p1
        total2 = p2 if total2 is None else total2 + p2
    assert np.array_equal(q1, total1 / 2)
    assert np.array_equal(q2, total2 / 2)


def test_ensemble_resets_on_batch_size_change():
    vocab, stream = tiny_corpus()
    m = build_model(tiny_config(vocab.size), 1)
    ens = TeacherEnsemble([m])
    ens.soft_labels(stream.ids[None, :4].repeat(2, axis=0), None)
    q = ens.soft_labels(stream.ids[None, :4], None)  # narrower batch
    ens.reset_state(1)
    fresh = ens.soft_labels(stream.ids[None, :4], None)
    assert np.array_equal(q, fresh)


def test_ensemble_validation():
    vocab, _ = tiny_corpus()
    with pytest.raises(ConfigError):
        TeacherEnsemble([])
    m1 = build_model(tiny_config(vocab.size), 1)
    m2 = build_model(tiny_config(vocab.size + 1), 2)
    with pytest.raises(ConfigError, match="disagree"):
        TeacherEnsemble([m1, m2])
    with pytest.raises(ConfigError):
        ensemble_predict(TeacherEnsemble([m1]), np.zeros((1, 2), dtype=np.int64), [])


def test_one_hot_oracle_rows():
    oracle = OneHotOracle(5)
    targets = np.array([[1, 4], [0, 2]])
    q = oracle.soft_labels(None, targets)
    # time-major rows: (t0,b0), (t0,b1), (t1,b0), (t1,b1)
    want = np.zeros((4, 5))
    for i, y in enumerate([1, 0, 4, 2]):
        want[i, y] = 1.0
    assert np.array_equal(q, want)


# ---------------------------------------------------------------------------
# Training behavior


def test_train_teacher_presence_contract():
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 0)
    with pytest.raises(ConfigError, match="needs a teacher"):
        train(model, stream, stream,
              TrainConfig(loss=DistillLossSpec("kl_only"), epochs=1))
    with pytest.raises(ConfigError, match="no teacher"):
        train(model, stream, stream,
              TrainConfig(loss=DistillLossSpec("ce_only"), epochs=1),
              teacher=OneHotOracle(vocab.size))


def test_train_zero_lr_leaves_params_bitwise():
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 0)
    before = params_of(model)
    result = train(model, stream, stream,
                   TrainConfig(loss=DistillLossSpec("ce_only"), lr=0.0, epochs=3))
    for arr, (_, p) in zip(before, model.parameters()):
        assert np.array_equal(arr, p.data)
    # identical params every epoch -> identical validation every epoch
    ppls = [l.valid_ppl for l in result.logs]
    assert ppls[0] == ppls[1] == ppls[2]
    assert result.best_epoch == 1


def test_train_is_deterministic():
    vocab, stream = tiny_corpus()

    def run():
        model = build_model(tiny_config(vocab.size), 0)
        result = train(model, stream, stream,
                       TrainConfig(loss=DistillLossSpec("ce_only"), lr=2.0,
                                   epochs=4, batch_size=2, bptt_len=6, seed=9))
        return [l.line() for l in result.logs], params_of(model)

    lines1, params1 = run()
    lines2, params2 = run()
    assert lines1 == lines2
    for a, b in zip(params1, params2):
        assert np.array_equal(a, b)


def test_train_loss_decreases_on_memorizable_text():
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 0)
    result = train(model, stream, stream,
                   TrainConfig(loss=DistillLossSpec("ce_only"), lr=2.0,
                               epochs=5, batch_size=2, bptt_len=6))
    assert result.logs[-1].train_loss < result.logs[0].train_loss
    assert result.best_valid_ppl < math.exp(result.logs[0].train_loss)


def test_train_restores_best_params():
    # lr=8 overshoots: validation worsens at epoch 3, so best is epoch 2
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 3)
    result = train(model, stream, stream,
                   TrainConfig(loss=DistillLossSpec("ce_only"), lr=8.0,
                               epochs=3, batch_size=2, bptt_len=6, seed=3))
    ppls = [l.valid_ppl for l in result.logs]
    assert result.best_epoch == int(np.argmin(ppls)) + 1
    assert result.best_epoch < len(ppls)  # last epoch must not be best here
    assert result.best_valid_ppl == min(ppls)
    # the model now holds the best epoch's params
    assert perplexity(model, stream) == result.best_valid_ppl


def test_plateau_decay_follows_logged_schedule():
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 3)
    result = train(model, stream, stream,
                   TrainConfig(loss=DistillLossSpec("ce_only"), lr=8.0,
                               epochs=10, batch_size=2, bptt_len=6, seed=3,
                               lr_decay_on_plateau=0.5))
    lrs = [l.lr for l in result.logs]
    ppls = [l.valid_ppl for l in result.logs]
    assert lrs[0] == 8.0
    best = math.inf
    prev_lr = prev_improved = None
    for lr_e, ppl_e in zip(lrs, ppls):
        if prev_lr is not None:
            assert lr_e == prev_lr * (1.0 if prev_improved else 0.5)
        prev_improved = ppl_e < best  # strict, judged against earlier epochs only
        best = min(best, ppl_e)
        prev_lr = lr_e
    assert lrs[-1] < 8.0  # this run really does plateau


def test_huge_asgd_patience_equals_disabled():
    vocab, stream = tiny_corpus()

    def run(patience):
        model = build_model(tiny_config(vocab.size), 3)
        result = train(model, stream, stream,
                       TrainConfig(loss=DistillLossSpec("ce_only"), lr=4.0,
                                   epochs=6, batch_size=2, bptt_len=6, seed=3,
                                   asgd_trigger_patience=patience))
        return [l.line() for l in result.logs], params_of(model)

    lines0, params0 = run(0)
    lines_big, params_big = run(1000)
    assert lines0 == lines_big
    for a, b in zip(params0, params_big):
        assert np.array_equal(a, b)


def test_asgd_averaging_changes_validation_after_trigger():
    # lr=8 plateaus at epoch 3; patience=1 arms the averager there, so
    # later validation scores diverge while the training losses stay equal.
    vocab, stream = tiny_corpus()

    def run(patience):
        model = build_model(tiny_config(vocab.size), 3)
        return train(model, stream, stream,
                     TrainConfig(loss=DistillLossSpec("ce_only"), lr=8.0,
                                 epochs=6, batch_size=2, bptt_len=6, seed=3,
                                 asgd_trigger_patience=patience)), model

    res0, _ = run(0)
    res1, model1 = run(1)
    assert [l.train_loss for l in res0.logs] == [l.train_loss for l in res1.logs]
    assert [l.valid_ppl for l in res0.logs] != [l.valid_ppl for l in res1.logs]
    # restored averaged params still reproduce the reported best score
    assert perplexity(model1, stream) == res1.best_valid_ppl


def test_train_reports_non_finite_loss_with_location():
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 3)
    # a one-hot teacher drives Q[y] to 1, so the trust weight hits the clamp
    # at -log(1e-8); an absurd alpha then overflows the weighted loss to inf
    cfg = TrainConfig(loss=DistillLossSpec("trust_reg", alpha=1e308),
                      lr=1.0, epochs=1, batch_size=2, bptt_len=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(TrainingError, match=r"epoch 1, batch 0"):
            train(model, stream, stream, cfg, teacher=OneHotOracle(vocab.size))


def test_train_rejects_corrupt_teacher_rows():
    vocab, stream = tiny_corpus()

    class BadTeacher:
        def reset_state(self, batch_size):
            pass

        def soft_labels(self, inputs, targets):
            n = inputs.shape[0] * inputs.shape[1]
            return np.full((n, vocab.size), 2.0)  # rows sum to 2V

    model = build_model(tiny_config(vocab.size), 0)
    cfg = TrainConfig(loss=DistillLossSpec("kl_only"), epochs=1,
                      batch_size=2, bptt_len=6)
    with pytest.raises(DataError, match="sums to"):
        train(model, stream, stream, cfg, teacher=BadTeacher())

    class WrongShapeTeacher(BadTeacher):
        def soft_labels(self, inputs, targets):
            return np.ones((3, 3, 3))

    model = build_model(tiny_config(vocab.size), 0)
    with pytest.raises(ShapeError):
        train(model, stream, stream, cfg, teacher=WrongShapeTeacher())


def test_nan_parameter_surfaces_as_numeric_error():
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 0)
    model.embedding.data[0, 0] = math.nan
    with pytest.raises(NumericError):
        train(model, stream, stream,
              TrainConfig(loss=DistillLossSpec("ce_only"), epochs=1,
                          batch_size=2, bptt_len=6))


def test_distillation_with_real_teacher_runs_and_improves():
    vocab, stream = tiny_corpus()
    teacher = build_model(tiny_config(vocab.size), 50)
    train(teacher, stream, stream,
          TrainConfig(loss=DistillLossSpec("ce_only"), lr=2.0, epochs=8,
                      batch_size=2, bptt_len=6))
    student = build_model(tiny_config(vocab.size, hidden_dim=8), 0)
    before = perplexity(student, stream)
    result = train(student, stream, stream,
                   TrainConfig(loss=DistillLossSpec("trust_reg", alpha=0.1),
                               lr=1.0, epochs=8, batch_size=2, bptt_len=6),
                   teacher=TeacherEnsemble([teacher]))
    assert result.best_valid_ppl < before


# ---------------------------------------------------------------------------
# Perplexity


def test_perplexity_matches_manual_mean_nll():
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 4)
    ppl = perplexity(model, stream, batch_size=1, bptt_len=len(stream) - 1)
    out = model_forward(model, stream.ids[None, :-1], model.init_state(1))
    y = stream.ids[1:]
    nll = -out.log_probs.data[np.arange(len(y)), y].mean()
    assert ppl == pytest.approx(math.exp(nll), rel=1e-12)


def test_perplexity_window_clamps_to_short_streams():
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 4)
    short = TokenStream(stream.ids[:12])
    # default bptt_len=32 exceeds the lane; the clamp must cover all 11 targets
    ppl = perplexity(model, short)
    out = model_forward(model, short.ids[None, :-1], model.init_state(1))
    y = short.ids[1:]
    nll = -out.log_probs.data[np.arange(len(y)), y].mean()
    assert ppl == pytest.approx(math.exp(nll), rel=1e-12)


def test_perplexity_batched_lanes():
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 4)
    n = (len(stream) // 2) * 2
    lane = n // 2
    # bptt covers the whole lane in one window, so the oracle below sees
    # exactly the same targets
    ppl = perplexity(model, TokenStream(stream.ids[:n]), batch_size=2,
                     bptt_len=lane - 1)
    inputs = np.stack([stream.ids[0:lane - 1], stream.ids[lane:2 * lane - 1]])
    targets = np.stack([stream.ids[1:lane], stream.ids[lane + 1:2 * lane]])
    out = model_forward(model, inputs, model.init_state(2))
    from lmdistill.model import flatten_targets
    y = flatten_targets(targets)
    nll = -out.log_probs.data[np.arange(len(y)), y].mean()
    assert ppl == pytest.approx(math.exp(nll), rel=1e-12)


def test_perplexity_rejects_tiny_streams():
    vocab, _ = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 4)
    with pytest.raises(DataError):
        perplexity(model, TokenStream(np.array([1])), batch_size=1)
    with pytest.raises(DataError):
        perplexity(model, TokenStream(np.array([1, 2, 3])), batch_size=2)


def test_perplexity_of_uniform_model_is_vocab_size():
    vocab, stream = tiny_corpus()
    model = build_model(tiny_config(vocab.size), 4)
    for _, p in model.parameters():
        p.data[:] = 0.0
    assert perplexity(model, stream) == pytest.approx(vocab.size, rel=1e-12)


# ---------------------------------------------------------------------------
# Checkpoints


def _trained_model(seed=5):
    vocab, stream = tiny_corpus()
    cfg = tiny_config(vocab.size,
                      dropout=DropoutSpec(input_rate=0.1, output_rate=0.2,
                                          ar_weight=1.5, tar_weight=0.25))
    model = build_model(cfg, seed)
    return vocab, stream, model


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    vocab, stream, model = _trained_model()
    path = tmp_path / "m.dlm"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for (name_a, a), (name_b, b) in zip(model.parameters(), loaded.parameters()):
        assert name_a == name_b
        assert np.array_equal(a.data, b.data)
    tokens = stream.ids[None, :6]
    out_a = model_forward(model, tokens, model.init_state(1))
    out_b = model_forward(loaded, tokens, loaded.init_state(1))
    assert np.array_equal(out_a.log_probs.data, out_b.log_probs.data)


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    _, _, model = _trained_model()
    p1, p2 = tmp_path / "a.dlm", tmp_path / "b.dlm"
    save_checkpoint(model, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    _, _, model = _trained_model()
    path = tmp_path / "m.dlm"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    path.write_bytes(b"XLM1\n" + blob[len(MAGIC):])
    with pytest.raises(FormatError, match="bad magic"):
        load_checkpoint(path)


def test_checkpoint_truncation_mid_payload(tmp_path):
    _, _, model = _trained_model()
    path = tmp_path / "m.dlm"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_truncation_missing_parameter(tmp_path):
    _, _, model = _trained_model()
    path = tmp_path / "m.dlm"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    end = blob.find(b"\n\n") + 2
    path.write_bytes(blob[:end])
    with pytest.raises(FormatError, match="missing parameter"):
        load_checkpoint(path)


def test_checkpoint_trailing_junk(tmp_path):
    _, _, model = _trained_model()
    path = tmp_path / "m.dlm"
    save_checkpoint(model, path)
    path.write_bytes(path.read_bytes() + b"JUNKJUN")
    with pytest.raises(FormatError, match="7 trailing bytes"):
        load_checkpoint(path)


def test_checkpoint_metadata_shape_mismatch(tmp_path):
    _, _, model = _trained_model()
    path = tmp_path / "m.dlm"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    assert blob.count(b"hidden_dim=12\n") == 1
    path.write_bytes(blob.replace(b"hidden_dim=12\n", b"hidden_dim=13\n"))
    with pytest.raises(FormatError, match="config implies"):
        load_checkpoint(path)


def test_checkpoint_metadata_missing_key(tmp_path):
    _, _, model = _trained_model()
    path = tmp_path / "m.dlm"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob.replace(b"num_experts=", b"nom_experts="))
    with pytest.raises(FormatError, match="num_experts"):
        load_checkpoint(path)


def test_checkpoint_metadata_bad_value(tmp_path):
    _, _, model = _trained_model()
    path = tmp_path / "m.dlm"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob.replace(b"embed_dim=8\n", b"embed_dim=z\n"))
    with pytest.raises(FormatError, match="bad checkpoint metadata"):
        load_checkpoint(path)


def test_checkpoint_unterminated_metadata(tmp_path):
    path = tmp_path / "m.dlm"
    path.write_bytes(MAGIC + b"vocab_size=5")
    with pytest.raises(FormatError, match="unterminated"):
        load_checkpoint(path)


def test_ensemble_from_checkpoints(tmp_path):
    vocab, stream = tiny_corpus()
    m1 = build_model(tiny_config(vocab.size), 1)
    m2 = build_model(tiny_config(vocab.size, hidden_dim=10), 2)
    for m, name in ((m1, "a.dlm"), (m2, "b.dlm")):
        save_checkpoint(m, tmp_path / name)
    ens = TeacherEnsemble.from_checkpoints([tmp_path / "a.dlm", tmp_path / "b.dlm"])
    assert len(ens.members) == 2
    live = TeacherEnsemble([m1, m2])
    batch = stream.ids[None, :5]
    ens.reset_state(1)
    live.reset_state(1)
    assert np.array_equal(ens.soft_labels(batch, None), live.soft_labels(batch, None))


def test_ensemble_from_checkpoints_vocab_mismatch(tmp_path):
    vocab, _ = tiny_corpus()
    m1 = build_model(tiny_config(vocab.size), 1)
    m2 = build_model(tiny_config(vocab.size + 2), 2)
    save_checkpoint(m1, tmp_path / "a.dlm")
    save_checkpoint(m2, tmp_path / "b.dlm")
    with pytest.raises(ConfigError, match="disagree"):
        TeacherEnsemble.from_checkpoints([tmp_path / "a.dlm", tmp_path / "b.dlm"])
