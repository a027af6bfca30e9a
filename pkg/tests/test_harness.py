import csv
import io

import numpy as np
import pytest

from ldbn import cli
from ldbn.adapt import AdaptConfig
from ldbn.gradcheck import run_gradcheck
from ldbn.harness import (STREAM_COLUMNS, DeadlineBudget, FakeClock, UsageError, parse_config,
                          run_stream, write_stream_csv)
from ldbn.lane import cell_accuracy, decode_cells
from ldbn.nn import ADAPT, build_reference_model
from ldbn.scenario import ScenarioSpec, load_dataset, render_frame, save_frames
from ldbn.train import PretrainConfig
from ldbn.weights import save_weights

MS = 1_000_000


@pytest.fixture(scope="module")
def night_frames():
    spec = ScenarioSpec(rng_seed=21).with_profile("night")
    return [render_frame(spec, i) for i in range(6)]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestDeadline:
    def test_boundary_counts_as_met(self):
        budget = DeadlineBudget(25)
        assert budget.deadline_ms == 40.0
        assert not budget.missed(40.0)
        assert budget.missed(40.000001)

    def test_fake_clock_exact_boundary(self, night_frames):
        # three reads per frame: before inference, after inference, after the update
        ticks = [0, 10 * MS, 40 * MS, 100 * MS, 110 * MS, 140 * MS + 1]
        report = run_stream(build_reference_model(1), night_frames[:2], AdaptConfig(),
                            DeadlineBudget(25), clock=FakeClock(ticks=ticks))
        first, second = report.records
        assert (first.infer_ms, first.adapt_ms, first.total_ms) == (10.0, 30.0, 40.0)
        assert not first.deadline_miss
        assert second.deadline_miss

    def test_forty_ms_at_thirty_fps_always_misses(self, night_frames):
        report = run_stream(build_reference_model(1), night_frames, AdaptConfig(),
                            DeadlineBudget(30), clock=FakeClock(step_ns=20 * MS))
        assert all(r.total_ms == 40.0 for r in report.records)
        assert report.summary()["miss_rate"] == 1.0

    def test_fake_clock_needs_one_source(self):
        with pytest.raises(ValueError):
            FakeClock()


def test_stream_csv_layout(night_frames, tmp_path):
    report = run_stream(build_reference_model(1), night_frames[:3], AdaptConfig(batch_size=2),
                        clock=FakeClock(step_ns=MS // 3))
    path = tmp_path / "s.csv"
    write_stream_csv(report, path)
    rows = read_csv(path)
    assert tuple(rows[0]) == STREAM_COLUMNS
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    for row in rows[1:]:
        assert row[-1] in ("0", "1")
        digits = row[1].replace(".", "").replace("-", "").lstrip("0")
        assert len(digits.split("e")[0]) <= 6
    assert report.adapt_steps == 1


def test_stream_without_frames():
    with pytest.raises(UsageError):
        run_stream(build_reference_model(1), [], AdaptConfig())


class TestParseConfig:
    TEXT = """
    # pretraining
    seed = 3
    lanes = 2
    train_frames = 10
    val_frames = 5
    batch_size = 4
    learning_rate = 0.01   # constant
    momentum = 0.9
    max_epochs = 1
    target_accuracy = 0.5
    """

    def test_parses_types(self):
        values = parse_config(self.TEXT, PretrainConfig)
        assert values["seed"] == 3 and values["learning_rate"] == 0.01
        assert PretrainConfig(**values).batch_size == 4

    def test_missing_key_is_named(self):
        text = self.TEXT.replace("momentum = 0.9", "")
        with pytest.raises(UsageError, match="missing config key 'momentum'"):
            parse_config(text, PretrainConfig)

    def test_unknown_key(self):
        with pytest.raises(UsageError, match="unknown key 'colour'"):
            parse_config(self.TEXT + "colour = red\n", PretrainConfig)

    def test_duplicate_key(self):
        with pytest.raises(UsageError, match="duplicate"):
            parse_config(self.TEXT + "seed = 4\n", PretrainConfig)

    def test_bad_type(self):
        with pytest.raises(UsageError, match="seed expects int"):
            parse_config(self.TEXT.replace("seed = 3", "seed = three"), PretrainConfig)


class TestGradcheck:
    def test_deterministic(self):
        a = run_gradcheck(seed=5, trials=3)
        b = run_gradcheck(seed=5, trials=3)
        assert [r.max_rel_error for r in a] == [r.max_rel_error for r in b]
        assert all(r.passed for r in a)

    def test_corrupted_backward_is_caught(self):
        from ldbn.nn import bn_backward

        def broken(cache, dout):
            dx, dgamma, dbeta = bn_backward(cache, dout)
            return dx, dgamma * 1.01, dbeta

        results = run_gradcheck(seed=0, trials=3, overrides={"batchnorm": broken})
        failed = {r.kernel for r in results if not r.passed}
        assert failed == {"batchnorm"}

    def test_cli_exit_code(self, capsys):
        assert cli.main(["gradcheck", "--trials", "2"]) == 0
        out = capsys.readouterr().out
        assert "batchnorm" in out and "FAIL" not in out


class TestCliExitCodes:
    def test_eval_empty_dataset(self, tmp_path):
        weights, data = tmp_path / "m.ldbn", tmp_path / "empty.ldds"
        save_weights(build_reference_model(0), weights)
        save_frames(ScenarioSpec(), [], data)
        assert cli.main(["eval", "--weights", str(weights), "--dataset", str(data)]) == 1

    def test_eval_corrupt_dataset(self, tmp_path):
        weights, data = tmp_path / "m.ldbn", tmp_path / "bad.ldds"
        save_weights(build_reference_model(0), weights)
        data.write_bytes(b"NOPE" + bytes(40))
        assert cli.main(["eval", "--weights", str(weights), "--dataset", str(data)]) == 2

    def test_corrupt_weights(self, tmp_path):
        weights = tmp_path / "m.ldbn"
        weights.write_bytes(b"LDBN\x07\x00\x00\x00")
        assert cli.main(["adapt", "--weights", str(weights), "--frames", "1",
                         "--report", str(tmp_path / "r.csv")]) == 2

    def test_missing_file(self, tmp_path):
        assert cli.main(["eval", "--weights", str(tmp_path / "none.ldbn"),
                         "--dataset", str(tmp_path / "none.ldds")]) == 1

    def test_bad_batch_size(self, tmp_path):
        weights = tmp_path / "m.ldbn"
        save_weights(build_reference_model(0), weights)
        assert cli.main(["adapt", "--weights", str(weights), "--bs", "3", "--frames", "2",
                         "--report", str(tmp_path / "r.csv")]) == 1

    def test_bad_seed_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LDBN_SEED", "abc")
        assert cli.main(["generate", "--frames", "1", "--out", str(tmp_path / "d.ldds")]) == 1


def test_seed_env_override(tmp_path, monkeypatch):
    explicit, env = tmp_path / "a.ldds", tmp_path / "b.ldds"
    assert cli.main(["generate", "--frames", "2", "--seed", "5", "--out", str(explicit)]) == 0
    monkeypatch.setenv("LDBN_SEED", "5")
    assert cli.main(["generate", "--frames", "2", "--out", str(env)]) == 0
    assert explicit.read_bytes() == env.read_bytes()


SMALL_PRETRAIN = """
seed = 11
lanes = 2
train_frames = 48
val_frames = 16
batch_size = 16
learning_rate = 0.02
momentum = 0.9
max_epochs = 1
target_accuracy = {target}
"""


def test_pretrain_is_deterministic(tmp_path, capsys):
    cfg = tmp_path / "p.cfg"
    cfg.write_text(SMALL_PRETRAIN.format(target=0.05))
    codes = [cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / f"{i}.ldbn"),
                       "--log", str(tmp_path / f"{i}.csv")]) for i in range(2)]
    assert codes == [0, 0]
    assert (tmp_path / "0.ldbn").read_bytes() == (tmp_path / "1.ldbn").read_bytes()
    assert read_csv(tmp_path / "0.csv")[0] == ["epoch", "loss", "val_accuracy"]
    assert "bn_affine parameters 352 of 1483240" in capsys.readouterr().out


def test_pretrain_nonconvergence_exit_code(tmp_path):
    cfg = tmp_path / "p.cfg"
    cfg.write_text(SMALL_PRETRAIN.format(target=1.0))
    out = tmp_path / "m.ldbn"
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 3
    assert out.exists()


def test_eval_matches_pretraining_val(pretrained, tmp_path, capsys):
    weights, data = tmp_path / "m.ldbn", tmp_path / "val.ldds"
    save_weights(pretrained.model, weights)
    assert cli.main(["generate", "--frames", "500", "--seed", "7", "--start", "1000000",
                     "--out", str(data)]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--weights", str(weights), "--dataset", str(data)]) == 0
    acc = float(capsys.readouterr().out.split("accuracy")[-1])
    assert acc == pytest.approx(pretrained.val_accuracy, abs=1e-3)


def test_adapt_lr_zero_matches_frozen_adapt_mode(tmp_path, capsys):
    model = build_reference_model(4)
    weights, report = tmp_path / "m.ldbn", tmp_path / "r.csv"
    save_weights(model, weights)
    assert cli.main(["adapt", "--weights", str(weights), "--lr", "0", "--frames", "5",
                     "--seed", "9", "--report", str(report), "--fake-clock-ms", "10"]) == 0
    rows = read_csv(report)[1:]
    spec = ScenarioSpec(rng_seed=9).with_profile("night")
    for i, row in enumerate(rows):
        frame = render_frame(spec, i)
        cells = decode_cells(model.forward(frame.image[None], ADAPT)[0], spec.grid)
        assert float(row[2]) == pytest.approx(cell_accuracy(cells, frame.label, spec.grid),
                                              rel=1e-5)
        assert float(row[5]) == 10.0
    assert "frozen_accuracy" in capsys.readouterr().out


def test_generated_dataset_loads(tmp_path):
    path = tmp_path / "d.ldds"
    assert cli.main(["generate", "--frames", "3", "--profile", "fog", "--seed", "2",
                     "--out", str(path)]) == 0
    spec, frames = load_dataset(io.BytesIO(path.read_bytes()))
    assert spec.profile == "fog" and len(frames) == 3
    np.testing.assert_array_equal(frames[1].image, render_frame(spec, 1).image)
