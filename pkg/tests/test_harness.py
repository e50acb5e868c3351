import json
import math

import numpy as np
import pytest

from golo import checkpoint as ckpt
from golo import cli
from golo import config as config_io
from golo import train as train_mod
from golo.checks import run_checks
from golo.config import Config, ModelConfig
from golo.errors import ConfigError, EvaluationError, FormatError, TrainingAborted, TruncatedFile
from golo.evaluate import ImagePredictions, ImageTruth, evaluate_detections, interpolated_ap
from golo.optim import AdamState, adamw_step, clip_grad_norm, lr_at
from golo.oracles import naive_ap


def tiny_config(out_dir, steps=6, **model) -> Config:
    cfg = Config()
    cfg.model = ModelConfig(**{"n_queries": 5, "channels": 8, "n_meta": 4, "k_mff": 4, "n_points": 2,
                               "roi_size": 3, "heads": 2, "backbone_width": 4, **model})
    cfg.schedule.total_steps = steps
    cfg.schedule.batch_size = 2
    cfg.schedule.checkpoint_every = 3
    cfg.optim.lr = 1e-3
    cfg.out_dir = str(out_dir)
    return cfg.validate()


class TestAdamW:
    def test_first_step_hand_value(self):
        theta = np.zeros(1)
        adamw_step({"t": theta}, {"t": np.ones(1)}, AdamState(), lr=0.1)
        assert theta[0] == pytest.approx(-0.1, rel=1e-6)

    def test_zero_gradient_no_decay_is_fixed(self):
        theta = np.array([0.3, -2.0])
        adamw_step({"t": theta}, {"t": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(theta, [0.3, -2.0])

    def test_decay_is_decoupled(self):
        theta = np.array([1.0, -4.0])
        adamw_step({"t": theta}, {"t": np.zeros(2)}, AdamState(), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(theta, np.array([1.0, -4.0]) * (1 - 0.05))

    def test_non_finite_gradient_rejected_before_update(self):
        a, b = np.ones(2), np.ones(2)
        state = AdamState()
        with pytest.raises(EvaluationError):
            adamw_step({"a": a, "b": b}, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state, lr=0.1)
        np.testing.assert_array_equal(a, 1.0)
        assert state.step == 0

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)


class TestSchedule:
    @pytest.mark.parametrize("frac,factor", [(0.0, 1), (0.5, 1), (0.8, 0.1), (0.95, 0.01)])
    def test_drops(self, frac, factor):
        assert lr_at(int(frac * 3600), 1e-4, 3600) == pytest.approx(1e-4 * factor)

    def test_drop_points(self):
        assert lr_at(2699, 1.0, 3600) == 1.0 and lr_at(2700, 1.0, 3600) == pytest.approx(0.1)
        assert lr_at(3300, 1.0, 3600) == pytest.approx(0.01)


class TestCheckpoint:
    def entries(self):
        rng = np.random.default_rng(0)
        return {"w": rng.normal(size=(3, 4)).astype(np.float32), "scalar": np.array(2.5, np.float32),
                "naïve/unicode": rng.normal(size=(2, 1, 2)).astype(np.float32),
                "empty": np.zeros((0, 3), np.float32)}

    def test_round_trip_is_bit_exact(self, tmp_path):
        src = self.entries()
        ckpt.save_checkpoint(tmp_path / "a.golo", src)
        out = ckpt.load_checkpoint(tmp_path / "a.golo")
        assert list(out) == list(src)
        for k in src:
            assert out[k].shape == src[k].shape and out[k].tobytes() == src[k].tobytes()

    def test_layout(self):
        raw = ckpt.dumps({"ab": np.array([[1.0, 2.0]], np.float32)})
        assert raw[:4] == b"GOLO" and raw[4:8] == (1).to_bytes(4, "little")
        assert raw[8:12] == (2).to_bytes(4, "little") and raw[12:14] == b"ab"
        assert raw[14:18] == (2).to_bytes(4, "little")
        assert raw[18:26] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.frombuffer(raw[26:], "<f4").tolist() == [1.0, 2.0]

    def test_bad_magic(self):
        raw = bytearray(ckpt.dumps(self.entries()))
        raw[0:4] = b"NOPE"
        with pytest.raises(FormatError):
            ckpt.loads(bytes(raw))

    def test_bad_version(self):
        raw = bytearray(ckpt.dumps(self.entries()))
        raw[4] = 9
        with pytest.raises(FormatError):
            ckpt.loads(bytes(raw))

    @pytest.mark.parametrize("cut", [3, 10, 30, -1])
    def test_truncation_is_io_error(self, cut):
        raw = ckpt.dumps(self.entries())
        with pytest.raises(OSError):
            ckpt.loads(raw[:cut])
        assert issubclass(TruncatedFile, OSError)

    def test_text_entries(self):
        assert ckpt.decode_text(ckpt.encode_text("[model]\nx = ü")) == "[model]\nx = ü"

    def test_save_leaves_no_temp_files(self, tmp_path):
        ckpt.save_checkpoint(tmp_path / "c.golo", self.entries())
        ckpt.save_checkpoint(tmp_path / "c.golo", self.entries())
        assert [p.name for p in tmp_path.iterdir()] == ["c.golo"]


class TestEvaluate:
    def test_single_exact_prediction(self):
        res = evaluate_detections([ImagePredictions([[10, 10, 20, 20]], [0.9], [1])],
                                  [ImageTruth([[10, 10, 20, 20]], [1])])
        assert res.AP == res.AP50 == res.AP75 == 1.0

    def test_no_predictions(self):
        res = evaluate_detections([ImagePredictions(np.zeros((0, 4)), [], [])], [ImageTruth([[0, 0, 5, 5]], [1])])
        assert res.AP == 0.0 and res.num_preds == 0

    def test_true_positive_then_false_positive(self):
        res = evaluate_detections([ImagePredictions([[0, 0, 10, 10], [30, 30, 5, 5]], [0.9, 0.5], [1, 1])],
                                  [ImageTruth([[0, 0, 10, 10]], [1])])
        assert res.AP50 == 1.0

    def test_false_positive_ranked_first(self):
        tp = np.array([0.0, 1.0])
        assert interpolated_ap(tp, 1) == pytest.approx(0.5)

    def test_each_truth_matched_once(self):
        res = evaluate_detections([ImagePredictions([[0, 0, 10, 10]] * 2, [0.9, 0.8], [1, 1])],
                                  [ImageTruth([[0, 0, 10, 10], [50, 50, 10, 10]], [1, 1])])
        # recall reaches 0.5 at precision 1; the duplicate cannot claim the second box
        assert res.AP50 == pytest.approx(51 / 101)

    def test_classes_averaged(self):
        res = evaluate_detections([ImagePredictions([[0, 0, 10, 10]], [0.9], [1])],
                                  [ImageTruth([[0, 0, 10, 10], [20, 20, 5, 5]], [1, 2])])
        assert res.per_class == {1: 1.0, 2: 0.0} and res.AP50 == 0.5

    def test_matches_brute_force_curve(self):
        dets = [(0.9, 0, (0, 0, 10, 10)), (0.8, 0, (1, 1, 10, 10)), (0.6, 1, (40, 40, 8, 8)),
                (0.4, 1, (5, 5, 3, 3)), (0.3, 0, (21, 20, 10, 10))]
        gts = [(0, (0, 0, 10, 10)), (0, (20, 20, 10, 10)), (1, (40, 41, 8, 8))]
        preds = [ImagePredictions([d[2] for d in dets if d[1] == i], [d[0] for d in dets if d[1] == i],
                                  [1] * sum(d[1] == i for d in dets)) for i in range(2)]
        truths = [ImageTruth([g[1] for g in gts if g[0] == i], [1] * sum(g[0] == i for g in gts))
                  for i in range(2)]
        res = evaluate_detections(preds, truths)
        assert res.AP50 == pytest.approx(naive_ap(dets, gts, 0.5), abs=1e-12)
        assert res.AP75 == pytest.approx(naive_ap(dets, gts, 0.75), abs=1e-12)

    def test_score_threshold(self):
        res = evaluate_detections([ImagePredictions([[0, 0, 10, 10]], [0.2], [1])],
                                  [ImageTruth([[0, 0, 10, 10]], [1])], score_thresh=0.5)
        assert res.AP == 0.0


class TestConfig:
    def test_round_trip(self):
        cfg = Config()
        cfg.model.channels = 32
        cfg.data.multiscale = True
        cfg.out_dir = "somewhere"
        assert config_io.loads(cfg.dumps()) == cfg

    def test_sections_and_dotted_keys(self):
        cfg = config_io.loads("seed = 3\n[model]\nheads = 2  # comment\n\noptim.lr = 0.5\n")
        assert cfg.seed == 3 and cfg.model.heads == 2 and cfg.optim.lr == 0.5

    @pytest.mark.parametrize("text", ["[model]\nwidth = 3", "model.channels = many", "[optim]\nlr = -1",
                                      "[schedule]\ndrop1 = 0.95", "[model]\nchannels = 30", "nonsense"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            config_io.loads(text)


class TestTraining:
    def test_log_fields_and_checkpoint(self, tmp_path):
        result = train_mod.train(tiny_config(tmp_path))
        rows = train_mod.read_log(result.log_path)
        assert [r["step"] for r in rows] == list(range(1, 7))
        assert all(list(r) == list(train_mod.LOG_FIELDS) for r in rows)
        entries = ckpt.load_checkpoint(result.checkpoint_path)
        assert entries["meta/step"][0] == 6
        model, cfg = train_mod.load_model(result.checkpoint_path)
        assert cfg.model.channels == 8 and cfg.schedule.total_steps == 6

    def test_identical_runs_are_byte_identical(self, tmp_path):
        a = train_mod.train(tiny_config(tmp_path / "a"))
        b = train_mod.train(tiny_config(tmp_path / "b"))
        assert a.log_path.read_bytes() == b.log_path.read_bytes()
        assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        full = train_mod.train(tiny_config(tmp_path / "full"))
        part = train_mod.train(tiny_config(tmp_path / "part"), max_steps=3)
        resumed = train_mod.train(tiny_config(tmp_path / "part"), resume=str(part.checkpoint_path))
        assert resumed.log_path.read_bytes() == full.log_path.read_bytes()
        assert resumed.checkpoint_path.read_bytes() == full.checkpoint_path.read_bytes()

    def test_zero_aux_weights_zero_aux_fields(self, tmp_path):
        cfg = tiny_config(tmp_path, steps=2)
        cfg.loss.aux_bbox = cfg.loss.aux_cls = 0.0
        rows = train_mod.read_log(train_mod.train(cfg).log_path)
        base = train_mod.read_log(train_mod.train(tiny_config(tmp_path / "base", steps=2)).log_path)
        nonzero = lambda r: sum(1 for k in train_mod.LOG_FIELDS[1:-1] if r[k] != 0)
        # the aux terms still get logged; they just no longer move the total
        total = lambda r: (2 * r["l_cls"] + 5 * r["l_l1"] + 2 * r["l_giou"])
        assert rows[0]["total"] == pytest.approx(total(rows[0]), rel=1e-5)
        assert base[0]["total"] > total(base[0])
        assert nonzero(rows[0]) == nonzero(base[0])

    def test_nan_aborts_and_keeps_last_good_checkpoint(self, tmp_path, monkeypatch):
        real = train_mod.total_loss
        calls = {"n": 0}

        def poisoned(*args, **kwargs):
            calls["n"] += 1
            out = real(*args, **kwargs)
            if calls["n"] == 5:
                out.total = out.total * float("nan")
            return out

        monkeypatch.setattr(train_mod, "total_loss", poisoned)
        cfg = tiny_config(tmp_path)
        with pytest.raises(TrainingAborted):
            train_mod.train(cfg)
        entries = ckpt.load_checkpoint(tmp_path / train_mod.CHECKPOINT_NAME)
        assert entries["meta/step"][0] == 3
        assert len(train_mod.read_log(tmp_path / train_mod.LOG_NAME)) == 4

    def test_smoke_run_stays_finite(self, tmp_path):
        cfg = Config()
        cfg.schedule.total_steps = 200
        cfg.schedule.checkpoint_every = 200
        rows = train_mod.read_log(train_mod.train(cfg, tmp_path).log_path)
        assert len(rows) == 200 and all(math.isfinite(r["total"]) for r in rows)


class TestCli:
    def test_check_invariants(self, tmp_path, capsys):
        assert cli.main(["check", "--suite", "invariants", "--report", str(tmp_path / "r.json")]) == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["passed"] and report["suite"] == "invariants"

    def test_gradcheck_module(self, capsys):
        assert cli.main(["gradcheck", "--module", "loss"]) == 0
        assert json.loads(capsys.readouterr().out)["passed"]

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[model]\nbogus = 1\n")
        assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
        assert cli.main(["train", "--set", "model.heads=3", "--out", str(tmp_path)]) == 2

    def test_runtime_abort_exit_code(self, tmp_path, capsys):
        (tmp_path / "x.golo").write_bytes(b"JUNKJUNK")
        assert cli.main(["eval", "--ckpt", str(tmp_path / "x.golo"), "--data", str(tmp_path)]) == 3

    def test_failed_check_exit_code(self, monkeypatch, capsys):
        import golo.checks as checks
        from golo.checks import CheckResult

        monkeypatch.setitem(checks.SUITES, "invariants",
                            (lambda: CheckResult("fake", False, 1.0, 0.0),))
        assert cli.main(["check", "--suite", "invariants"]) == 1

    def test_gen_data_train_eval(self, tmp_path, capsys):
        spec = tmp_path / "spec.cfg"
        cfg = tiny_config(tmp_path / "run", steps=3)
        spec.write_text(cfg.dumps())
        assert cli.main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "data"), "--count", "4"]) == 0
        assert cli.main(["train", "--config", str(spec), "--out", str(tmp_path / "run"), "--seed", "2"]) == 0
        capsys.readouterr()
        assert cli.main(["eval", "--ckpt", str(tmp_path / "run" / "checkpoint.golo"),
                         "--data", str(tmp_path / "data")]) == 0
        result = json.loads(capsys.readouterr().out)
        assert 0 <= result["AP"] <= result["AP50"] <= 1 and result["num_images"] == 4


def test_oracle_suite_passes():
    assert run_checks("oracle")["passed"]
