import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from banc import dsp, losses
from banc.autodiff import Tensor, grad_check, ops
from banc.model import ModelConfig, build_discriminators, build_model
from banc.model.module import Module

TOY = ModelConfig.toy()
# untrained outputs at unit input sit near |STFT| = 0, where log-magnitude is a cone
INPUT_GAIN = 30.0
FD_STEPS = (1e-5, 1e-6, 1e-7, 1e-8)
MEL = dict(sample_rate=TOY.sample_rate, fft_size=16, hop=4, win_length=12, n_mels=4)


class LinearDisc(Module):
    """Scores ``w * mean(x)`` per item, replicated over ``subs`` sub-discriminators."""

    def __init__(self, w, subs=3):
        super().__init__()
        self.w = Tensor(np.array(float(w)), requires_grad=True)
        self.subs = subs

    def __call__(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        m = ops.mean(x, axis=(1, 2))
        return [ops.reshape(m * self.w, (x.shape[0], 1)) for _ in range(self.subs)]


def _targets(cfg, rng, batch=2):
    n, nb = cfg.chunk_samples, cfg.bir_samples
    cleans = [Tensor(rng.standard_normal((batch, 1, n))) for _ in range(cfg.speakers)]
    birs = [Tensor(rng.standard_normal((batch, 2, nb))) for _ in range(cfg.speakers)]
    binaural = Tensor(rng.standard_normal((batch, 2, n)))
    return binaural, cleans, birs


class TestMelLoss:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 2, 64))
        assert losses.mel_loss(x, x, **MEL).item() == 0.0

    def test_sign_blind(self, rng):
        x = rng.standard_normal((1, 2, 64))
        assert losses.mel_loss(x, -x, **MEL).item() == 0.0

    def test_log_mel_matches_dsp(self, rng):
        x = rng.standard_normal((2, 48000 // 10))
        got = losses.log_mel(x, 4800, 256, 75, 150, 20).data
        ref = dsp.mel_spectrogram(x, 4800, 256, 75, 150, 20).values
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)

    def test_constant_offset_is_one(self):
        m = np.array([[0.5, -1.0], [2.0, 3.0]])
        assert ops.l1_loss(Tensor(m + 1.0), Tensor(m)).item() == 1.0

    def test_equals_numpy_l1(self, rng):
        x, y = rng.standard_normal((2, 1, 80))
        ref = np.mean(np.abs(dsp.mel_spectrogram(x, **MEL).values - dsp.mel_spectrogram(y, **MEL).values))
        assert losses.mel_loss(x, y, **MEL).item() == pytest.approx(ref, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mel_loss"):
            losses.mel_loss(np.zeros((1, 1, 64)), np.zeros((1, 1, 60)), **MEL)

    def test_gradcheck(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 40)))
        y = Tensor(rng.standard_normal((1, 2, 40)), requires_grad=True)
        assert grad_check(lambda: losses.mel_loss(x, y, **MEL), [y]) < 1e-6


class TestMagLoss:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 2, 64))
        assert losses.mag_loss(x, x, 16, 4, 12).item() == 0.0

    def test_doubling_gives_log2_squared(self, rng):
        x = 1e3 * rng.standard_normal((1, 1, 4096))
        val = losses.mag_loss(x, 2.0 * x, 256, 75, 150).item()
        assert val == pytest.approx(np.log(2.0) ** 2, rel=1e-6)
        assert np.log(2.0) ** 2 == pytest.approx(0.4805, abs=1e-4)

    def test_disabled_contributes_zero(self, rng):
        cfg = ModelConfig.toy(use_mag_loss=False)
        b, c, r = _targets(cfg, rng)
        b2, c2, _ = _targets(cfg, np.random.default_rng(5))
        terms = losses.metric_terms(cfg, b, c, r, b2, c2, r)
        assert terms.mag.item() == 0.0
        assert terms.total.item() == terms.mel.item() + terms.ir.item()

    def test_gradcheck(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 40)))
        y = Tensor(rng.standard_normal((1, 1, 40)), requires_grad=True)
        assert grad_check(lambda: losses.mag_loss(x, y, 16, 4, 12), [y]) < 1e-6


class TestIrLoss:
    def test_identity(self, rng):
        b = rng.standard_normal((1, 2, 30))
        assert losses.ir_loss(b, b).item() == 0.0

    def test_constant_offset(self, rng):
        b = rng.standard_normal((1, 2, 30))
        assert losses.ir_loss(b, b + 0.1).item() == pytest.approx(0.01, rel=1e-12)

    def test_loop_oracle(self, rng):
        b, c = rng.standard_normal((2, 3, 2, 17))
        total = 0.0
        for i in range(3):
            for ch in range(2):
                for t in range(17):
                    total += (b[i, ch, t] - c[i, ch, t]) ** 2
        assert losses.ir_loss(b, c).item() == pytest.approx(total / b.size, abs=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError, match="ir_loss"):
            losses.ir_loss(np.zeros((1, 2, 4)), np.zeros((1, 2, 5)))


class TestMetricLoss:
    def test_perfect_is_zero(self, rng):
        cfg = ModelConfig.toy(speakers=2)
        b, c, r = _targets(cfg, rng)
        assert losses.metric_loss(cfg, b, c, r, b, c, r).item() == 0.0

    def test_only_bir_wrong(self, rng):
        b, c, r = _targets(TOY, rng)
        wrong = [Tensor(x.data + 0.3) for x in r]
        total = losses.metric_loss(TOY, b, c, r, b, c, wrong).item()
        assert total == losses.ir_loss(r[0], wrong[0]).item()

    def test_two_speaker_six_term_expansion(self, rng):
        cfg = ModelConfig.toy(speakers=2)
        b, c, r = _targets(cfg, rng)
        bh, ch, rh = _targets(cfg, np.random.default_rng(99))
        mp = dict(sample_rate=cfg.sample_rate, fft_size=cfg.fft_size, hop=cfg.hop, win_length=cfg.win_length,
                  n_mels=cfg.n_mels)
        sp = dict(fft_size=cfg.fft_size, hop=cfg.hop, win_length=cfg.win_length)

        def mm(x, y):
            return losses.mel_loss(x, y, **mp).item() + losses.mag_loss(x, y, **sp).item()

        expected = mm(b, bh)
        for i in range(2):
            expected += mm(c[i], ch[i]) + losses.ir_loss(r[i], rh[i]).item()
        got = losses.metric_loss(cfg, b, c, r, bh, ch, rh).item()
        assert got == pytest.approx(expected, abs=1e-9)

    def test_decomposes(self, rng):
        cfg = ModelConfig.toy(speakers=2)
        b, c, r = _targets(cfg, rng)
        bh, ch, rh = _targets(cfg, np.random.default_rng(3))
        t = losses.metric_terms(cfg, b, c, r, bh, ch, rh)
        assert t.total.item() - t.ir.item() == pytest.approx(t.mel.item() + t.mag.item(), abs=1e-12)

    def test_speaker_mismatch(self, rng):
        b, c, r = _targets(TOY, rng)
        with pytest.raises(ValueError, match="speakers"):
            losses.metric_loss(ModelConfig.toy(speakers=2), b, c, r, b, c, r)

    def test_non_negative(self, rng):
        cfg = ModelConfig.toy(speakers=2)
        b, c, r = _targets(cfg, rng)
        bh, ch, rh = _targets(cfg, np.random.default_rng(4))
        t = losses.metric_terms(cfg, b, c, r, bh, ch, rh)
        assert min(t.mel.item(), t.mag.item(), t.ir.item()) >= 0.0


class TestHinge:
    def _io(self, speakers):
        real_b = np.ones((2, 2, 8))
        real_c = [np.ones((2, 1, 8))] * speakers
        return real_b, real_c, -real_b, [-c for c in real_c]

    def test_zero_scores_one_speaker(self):
        d = LinearDisc(0.0)
        b, c, bh, ch = self._io(1)
        assert losses.disc_loss(d, d, b, c, bh, ch).item() == 4.0
        assert losses.adv_loss(d, d, bh, ch).item() == 2.0

    def test_zero_scores_two_speakers(self):
        d = LinearDisc(0.0)
        b, c, bh, ch = self._io(2)
        assert losses.disc_loss(d, d, b, c, bh, ch).item() == 6.0
        assert losses.adv_loss(d, d, bh, ch).item() == 3.0

    def test_saturated_disc(self):
        d = LinearDisc(1.0)
        b, c, bh, ch = self._io(2)
        assert losses.disc_loss(d, d, b, c, bh, ch).item() == 0.0

    def test_adv_saturated(self):
        d = LinearDisc(-1.5)
        _, _, bh, ch = self._io(2)
        assert losses.adv_loss(d, d, bh, ch).item() == 0.0

    def test_real_zero_discriminators(self):
        cfg = ModelConfig.toy()
        disc = build_discriminators(cfg)
        rng = np.random.default_rng(0)
        b, c, _ = _targets(cfg, rng)
        bh, ch, _ = _targets(cfg, np.random.default_rng(1))
        assert losses.disc_loss(disc.binaural, disc.speech, b, c, bh, ch).item() == 4.0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1.0, 50.0), st.floats(1.0, 10.0))
    def test_saturated_region_monotone(self, score, s):
        real = Tensor(np.array([score]))
        fake = Tensor(np.array([-score]))
        for t, sign in ((real, -1.0), (fake, 1.0)):
            before = losses._hinge_mean([t], sign).item()
            after = losses._hinge_mean([t * s], sign).item()
            assert before == after == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 5.0), st.floats(1.0, 10.0))
    def test_hinge_non_increasing_for_correct_sign(self, score, s):
        real = Tensor(np.array([score]))
        assert losses._hinge_mean([real * s], -1.0).item() <= losses._hinge_mean([real], -1.0).item()

    def test_stop_gradient_contracts(self):
        cfg = ModelConfig.toy()
        model = build_model(cfg).eval()
        disc = build_discriminators(cfg, zero_final=False)
        rng = np.random.default_rng(2)
        b, c, _ = _targets(cfg, rng, batch=1)
        out = model(rng.standard_normal((1, 2, 48)))
        losses.disc_loss(disc.binaural, disc.speech, b, c, out.binaural, out.cleans).backward()
        assert all(p.grad is None for p in model.parameters())
        assert any(p.grad is not None and np.any(p.grad) for p in disc.parameters())
        disc.zero_grad()
        out = model(rng.standard_normal((1, 2, 48)))
        losses.adv_loss(disc.binaural, disc.speech, out.binaural, out.cleans).backward()
        assert all(p.grad is None for p in disc.parameters())
        assert all(p.requires_grad for p in disc.parameters())
        assert any(p.grad is not None and np.any(p.grad) for p in model.speech_decoders.parameters())


class TestGenLoss:
    def test_weights_zero(self):
        m = Tensor(np.array(0.7))
        assert losses.gen_loss(m, 0.3, 0.2, lambda_adv=0.0, lambda_vq=0.0).item() == 0.7

    def test_weighted_sum(self):
        assert losses.gen_loss(0.5, 0.125, 0.25, lambda_adv=1.0, lambda_vq=1.0).item() == 0.875

    def test_stage_one_omits_adv(self):
        assert losses.gen_loss(0.5, 0.125, None).item() == 0.625

    def _loss(self, model, disc, x, targets):
        cfg = model.config
        out = model(x)
        b, c, r = targets
        metric = losses.metric_loss(cfg, b, c, r, out.binaural, out.cleans, out.birs)
        adv = losses.adv_loss(disc.binaural, disc.speech, out.binaural, out.cleans)
        return losses.gen_loss(metric, out.vq_loss, adv, cfg.lambda_adv, cfg.lambda_vq)

    def test_gradcheck_bypass_full_model(self):
        cfg = ModelConfig.toy(speakers=2)
        model = build_model(cfg).eval()
        model.set_bypass(True)
        disc = build_discriminators(cfg, zero_final=False)
        rng = np.random.default_rng(11)
        x = Tensor(INPUT_GAIN * rng.standard_normal((1, 2, 48)))
        targets = _targets(cfg, rng, batch=1)
        err = grad_check(lambda: self._loss(model, disc, x, targets), model.parameters(), h=FD_STEPS,
                         max_per_input=2, seed=3)
        assert err < 1e-4

    def test_gradcheck_quantized_synthesis(self):
        cfg = ModelConfig.toy()
        model = build_model(cfg).eval()
        disc = build_discriminators(cfg, zero_final=False)
        rng = np.random.default_rng(12)
        x = Tensor(INPUT_GAIN * rng.standard_normal((1, 2, 48)))
        targets = _targets(cfg, rng, batch=1)
        params = [p for name in ("speech_head", "speech_decoders", "ir_decoders")
                  for p in model.group(name).parameters()]
        err = grad_check(lambda: self._loss(model, disc, x, targets), params, h=FD_STEPS, max_per_input=3, seed=4)
        assert err < 1e-4


class TestLossReport:
    def _report(self):
        terms = losses.MetricTerms(Tensor(0.5), Tensor(0.25), Tensor(0.125))
        return losses.LossReport.from_terms(7, terms, vq=0.01, gen=0.885, adv=0.0, disc=4.0)

    def test_metric_sum(self):
        r = self._report()
        assert r.metric_total == pytest.approx(r.mel + r.mag + r.ir, abs=1e-9)

    def test_json_keys(self):
        rec = json.loads(self._report().to_json())
        assert list(rec) == ["step", "mel", "mag", "ir", "metric", "adv", "disc", "vq", "gen"]
        assert rec["step"] == 7 and rec["disc"] == 4.0

    def test_json_roundtrip(self):
        r = self._report()
        assert losses.LossReport.from_json(r.to_json()) == r

    def test_non_finite_rejected(self):
        r = self._report()
        r.mel = float("nan")
        with pytest.raises(FloatingPointError, match="mel"):
            r.check()
