import json

import numpy as np
import pytest

from banc import train
from banc.autodiff import Tensor
from banc.autodiff.checkpoint import CheckpointError
from banc.model import ANALYSIS_GROUPS, ModelConfig, build_model
from banc.train import Adam, TrainError, TrainPlan

CFG = ModelConfig.toy(speakers=2)
PLAN = TrainPlan(stage1_steps=4, stage2_steps=3, batch_size=2, lr_generator=1e-3, lr_discriminator=1e-3, seed=5)


def _arrays(speakers=2, n=6, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "mix": rng.standard_normal((n, 2, 48)).astype(np.float32),
        "clean": rng.standard_normal((n, speakers, 48)).astype(np.float32),
        "bir": rng.standard_normal((n, speakers, 2, 24)).astype(np.float32),
    }


def _model(cfg=CFG):
    return build_model(cfg, np.float32)


def _state_bytes(model):
    return {k: v.tobytes() for k, v in model.state_dict().items()}


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = Tensor(np.array([0.5, -2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        for _ in range(3):
            p.grad = np.zeros(2)
            opt.step()
        np.testing.assert_array_equal(p.data, [0.5, -2.0])

    def test_first_step_is_lr(self):
        p = Tensor(np.array(1.0), requires_grad=True)
        opt = Adam({"p": p}, lr=1e-3)
        p.grad = np.array(1.0)
        opt.step()
        assert p.data - 1.0 == pytest.approx(-1e-3, rel=1e-8)

    def test_matches_hand_recurrence(self):
        grads = [0.5, -1.0, 2.0, 0.25]
        lr, b1, b2, eps = 0.01, 0.9, 0.98, 1e-9
        x, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        p = Tensor(np.array(1.0), requires_grad=True)
        opt = Adam({"p": p}, lr=lr)
        for g in grads:
            p.grad = np.array(g)
            opt.step()
        assert p.data == pytest.approx(x, rel=1e-14)

    def test_missing_gradient_treated_as_zero(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        Adam({"p": p}, lr=0.1).step()
        np.testing.assert_array_equal(p.data, [1.0])

    def test_nan_gradient_aborts(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="p"):
            Adam({"p": p}, lr=0.1).step()
        np.testing.assert_array_equal(p.data, [1.0])

    def test_functional_wrapper(self):
        p = Tensor(np.array(2.0), requires_grad=True)
        p.grad = np.array(1.0)
        state = train.adam_step({"p": p}, None, lr=1e-2)
        assert state.t == 1 and p.data == pytest.approx(2.0 - 1e-2, rel=1e-7)

    def test_state_roundtrip(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.array([0.3, -0.1])
        opt.step()
        other = Adam({"p": p}, lr=0.1)
        other.load_state_dict(opt.state_dict("g"), "g")
        assert other.t == 1
        np.testing.assert_array_equal(other.m["p"], opt.m["p"])
        np.testing.assert_array_equal(other.v["p"], opt.v["p"])


class TestPlan:
    def test_defaults(self):
        plan = TrainPlan.desk()
        assert (plan.stage1_steps, plan.stage2_steps, plan.batch_size) == (300, 100, 4)
        assert (plan.lr_generator, plan.lr_discriminator) == (1e-4, 2e-4)
        assert set(plan.freeze) == set(ANALYSIS_GROUPS)

    def test_reference_counts(self):
        plan = TrainPlan.reference()
        assert (plan.stage1_steps, plan.stage2_steps) == (200_000, 500_000)

    def test_unknown_group(self):
        with pytest.raises(TrainError, match="unknown groups"):
            TrainPlan(freeze=("encoder_x",)).validate()

    def test_positive_steps(self):
        with pytest.raises(TrainError, match="positive"):
            TrainPlan(stage1_steps=0).validate()

    def test_dict_roundtrip(self):
        plan = TrainPlan(seed=9, freeze=("ir_encoder",))
        assert TrainPlan.from_dict(json.loads(json.dumps(plan.to_dict()))) == plan


class TestBatches:
    def test_indices_deterministic_and_distinct(self):
        a = train.batch_indices(20, 4, 3, 7, 1)
        np.testing.assert_array_equal(a, train.batch_indices(20, 4, 3, 7, 1))
        assert len(set(a.tolist())) == 4
        assert not np.array_equal(a, train.batch_indices(20, 4, 3, 8, 1))

    def test_batch_larger_than_dataset(self):
        idx = train.batch_indices(3, 5, 0, 0, 1)
        assert idx.shape == (5,) and idx.max() < 3

    def test_empty_dataset(self):
        with pytest.raises(TrainError, match="empty"):
            train.run_stage1(_model(), [], PLAN)

    def test_speaker_mismatch(self):
        with pytest.raises(TrainError, match="speakers"):
            train.run_stage1(_model(), _arrays(speakers=1), PLAN)


class TestStage1:
    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model = _model()
            st = train.run_stage1(model, _arrays(), PLAN)
            runs.append(([r.to_json() for r in st.history], _state_bytes(model)))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_every_parameter_receives_gradient(self):
        model = _model()
        seen = {name: False for name, _ in model.named_parameters()}
        params = dict(model.named_parameters())

        def probe(state, report):
            for name, p in params.items():
                if p.grad is not None and np.any(p.grad != 0):
                    seen[name] = True

        train.run_stage1(model, _arrays(), PLAN, callback=probe)
        assert [k for k, v in seen.items() if not v] == []

    def test_objective_has_no_adversarial_terms(self):
        st = train.run_stage1(_model(), _arrays(), PLAN)
        for r in st.history:
            assert r.adv == 0.0 and r.disc == 0.0
            assert r.generator_total == pytest.approx(r.metric_total + r.vq, rel=1e-5)

    def test_divergence_detected(self):
        model = _model()
        model.speech_head.weight.data[...] = np.inf
        with pytest.raises(TrainError, match="diverged"):
            train.run_stage1(model, _arrays(), PLAN)

    def test_loss_log_written(self, tmp_path):
        train.run_stage1(_model(), _arrays(), PLAN, out_dir=tmp_path)
        lines = (tmp_path / "stage1" / "losses.jsonl").read_text().splitlines()
        assert [json.loads(x)["step"] for x in lines] == [0, 1, 2, 3]
        assert set(json.loads(lines[0])) == {"step", "mel", "mag", "ir", "metric", "adv", "disc", "vq", "gen"}
        manifest = json.loads((tmp_path / "latest.json").read_text())
        assert manifest == {"stage": "stage1", "step": 4, "checkpoint": "stage1/checkpoint.bin"}
        assert ModelConfig.load(tmp_path / "stage1" / "config.json") == CFG


class TestStage2:
    @pytest.fixture
    def stage1_dir(self, tmp_path):
        train.run_stage1(_model(), _arrays(), PLAN, out_dir=tmp_path)
        return tmp_path

    def test_requires_stage1(self, tmp_path):
        with pytest.raises(TrainError, match="stage-1 checkpoint"):
            train.run_stage2(_model(), _arrays(), PLAN, out_dir=tmp_path)

    def test_rejects_wrong_stage(self, stage1_dir):
        train.run_stage2(_model(), _arrays(), PLAN, out_dir=stage1_dir)
        with pytest.raises(CheckpointError, match="not a stage-1"):
            train.run_stage2(_model(), _arrays(), PLAN, stage1_checkpoint=stage1_dir / "stage2" / "checkpoint.bin")

    def test_frozen_parameters_bit_identical(self, stage1_dir):
        model = _model()
        train.load_model_weights(model, stage1_dir / "stage1" / "checkpoint.bin")
        before = _state_bytes(model)
        train.run_stage2(model, _arrays(), PLAN, out_dir=stage1_dir)
        after = _state_bytes(model)
        frozen = [k for k in before if k.split(".")[0] in ANALYSIS_GROUPS]
        assert frozen and all(before[k] == after[k] for k in frozen)
        changed = [k for k in before if k not in frozen and before[k] != after[k]]
        assert any(k.startswith("speech_decoders") for k in changed)
        assert any(k.startswith("ir_decoders") for k in changed)
        assert any(k.startswith("mask_heads") for k in changed)

    def test_gradient_audit(self, stage1_dir):
        model = _model()
        params = dict(model.named_parameters())
        touched = set()

        def probe(state, report):
            for name, p in params.items():
                if p.grad is not None:
                    touched.add(name.split(".")[0])
            assert report.disc > 0.0

        st = train.run_stage2(model, _arrays(), PLAN, out_dir=stage1_dir, callback=probe)
        assert touched and not touched & set(ANALYSIS_GROUPS)
        assert all(p.requires_grad for p in model.parameters())
        assert all(p.grad is not None for p in st.disc.parameters())

    def test_initial_disc_loss_is_six_for_two_speakers(self, stage1_dir):
        st = train.run_stage2(_model(), _arrays(), PLAN, out_dir=stage1_dir)
        assert st.history[0].disc == 6.0

    def test_deterministic(self, stage1_dir):
        logs = [[r.to_json() for r in train.run_stage2(_model(), _arrays(), PLAN, out_dir=stage1_dir).history]
                for _ in range(2)]
        assert logs[0] == logs[1]


class TestCheckpoints:
    def test_save_load_save_identical(self, tmp_path):
        model = _model()
        st = train.run_stage1(model, _arrays(), PLAN, out_dir=tmp_path)
        path = tmp_path / "stage1" / "checkpoint.bin"
        first = path.read_bytes()
        fresh = train.TrainState(_model(), PLAN, stage=1)
        fresh.opt_g = Adam(dict(fresh.model.named_parameters()), PLAN.lr_generator)
        train._restore(fresh, train.read_checkpoint(path))
        train.save_checkpoint(fresh, tmp_path / "again")
        assert (tmp_path / "again" / "stage1" / "checkpoint.bin").read_bytes() == first
        assert fresh.step == st.step

    def test_resume_stage1_equivalent(self, tmp_path):
        full = _model()
        train.run_stage1(full, _arrays(), PLAN)
        k = PLAN.stage1_steps - 1
        train.run_stage1(_model(), _arrays(), TrainPlan(**{**PLAN.to_dict(), "stage1_steps": k}), out_dir=tmp_path)
        resumed = _model()
        st = train.run_stage1(resumed, _arrays(), PLAN, out_dir=tmp_path, resume=True)
        assert st.step == PLAN.stage1_steps
        assert _state_bytes(resumed) == _state_bytes(full)
        steps = [json.loads(x)["step"] for x in (tmp_path / "stage1" / "losses.jsonl").read_text().splitlines()]
        assert steps == list(range(PLAN.stage1_steps))

    def test_resume_stage2_equivalent(self, tmp_path):
        train.run_stage1(_model(), _arrays(), PLAN, out_dir=tmp_path)
        s1 = tmp_path / "stage1" / "checkpoint.bin"
        full = _model()
        full_state = train.run_stage2(full, _arrays(), PLAN, stage1_checkpoint=s1)
        part = tmp_path / "part"
        short = TrainPlan(**{**PLAN.to_dict(), "stage2_steps": 2})
        train.run_stage2(_model(), _arrays(), short, out_dir=part, stage1_checkpoint=s1)
        resumed = _model()
        st = train.run_stage2(resumed, _arrays(), PLAN, out_dir=part, stage1_checkpoint=s1, resume=True)
        assert _state_bytes(resumed) == _state_bytes(full)
        assert _state_bytes(st.disc) == _state_bytes(full_state.disc)

    def test_corrupt_magic(self, tmp_path):
        train.run_stage1(_model(), _arrays(), PLAN, out_dir=tmp_path)
        path = tmp_path / "stage1" / "checkpoint.bin"
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="offset 0"):
            train.read_checkpoint(path)

    def test_truncated(self, tmp_path):
        train.run_stage1(_model(), _arrays(), PLAN, out_dir=tmp_path)
        path = tmp_path / "stage1" / "checkpoint.bin"
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(CheckpointError):
            train.read_checkpoint(path)

    def test_latest_manifest(self, tmp_path):
        train.run_stage1(_model(), _arrays(), PLAN, out_dir=tmp_path)
        stage, step, path = train.latest_checkpoint(tmp_path)
        assert (stage, step) == ("stage1", 4) and path.exists()
        assert train.latest_checkpoint(tmp_path / "nothing") is None


class TestHelpers:
    def test_block_means(self):
        vals = np.arange(120, dtype=float)
        np.testing.assert_array_equal(train.block_means(vals, 50), [24.5, 74.5])

    def test_trend_violations(self):
        vals = np.concatenate([np.full(50, 5.0), np.full(50, 6.0), np.full(50, 4.0), np.full(50, 4.5)])
        assert train.trend_violations(vals, 50) == 2

    def test_evaluate_metric_leaves_state(self):
        model = _model()
        before = _state_bytes(model)
        val = train.evaluate_metric(model, _arrays())
        assert np.isfinite(val) and val > 0
        assert _state_bytes(model) == before
        assert model.training
