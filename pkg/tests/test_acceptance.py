"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. The two training-based
criteria (gamma pressure, DGM-vs-STE) take a few minutes each; everything
else is seconds.
"""

import json
from contextlib import contextmanager

import numpy as np
import pytest

from dynaquant import autodiff as ad
from dynaquant.autodiff import Tensor
from dynaquant.cli import main as cli_main
from dynaquant.data import synthetic_dataset
from dynaquant.metrics import RDCurve, bd_rate, model_size, theoretical_speedup
from dynaquant.quant import DGM, dgm_grad, dgm_soft_round, fake_quantize
from dynaquant.selector import gumbel_softmax
from dynaquant.train import (TrainConfig, Trainer, bits_loss, evaluate_model,
                             load_checkpoint, save_checkpoint)

from test_quant import params_from, surrogate_forward


@contextmanager
def criterion(num: int, desc: str):
    try:
        yield
    except Exception:
        print(f"\nACCEPTANCE {num:02d} FAIL: {desc}")
        raise
    print(f"\nACCEPTANCE {num:02d} PASS: {desc}")


# -- experiment configuration shared by criteria 8 and 9 -----------------------

EXP_SEEDS = (1, 2, 3)
EXP_DATASET = dict(count=12, size=48, seed=7)


def exp_config(**kw):
    base = dict(batch_size=4, crop=48, lr=1e-3, lambda_rd=0.0067,
                bit_choices=(4, 6, 8), channels=(8, 12), latent_channels=16,
                steps=600, mode="ste")
    base.update(kw)
    return TrainConfig(**base)


EXP_CFG_TEXT = """
train.batch_size = 4
train.crop = 48
train.lr = 1e-3
train.lambda = 0.0067
train.beta = 1.0        # the proxy's exactly-normalized shape factor
quant.bits = 4,6,8
model.channels = 8,12
model.latent_channels = 16
data.kind = synthetic
data.count = 12
data.size = 48
data.seed = 7
ablate.steps = 600
ablate.seeds = 1,2,3
"""


class TestCriterion1ModelSize:
    def test_model_size_arithmetic(self):
        with criterion(1, "model size follows fp32_size * b/32"):
            assert model_size(137.11, 8.0) == pytest.approx(34.28, abs=0.005)
            assert model_size(45.08, 6.19) == pytest.approx(8.72, abs=0.005)
            assert model_size(19.37, 7.03) == pytest.approx(4.26, abs=0.005)


class TestCriterion2Speedup:
    def test_speedup_arithmetic(self):
        with criterion(2, "theoretical speedup is 32/b"):
            assert theoretical_speedup(8.0) == pytest.approx(4.00, abs=0.01)
            assert theoretical_speedup(6.19) == pytest.approx(5.17, abs=0.01)
            assert theoretical_speedup(6.95) == pytest.approx(4.61, abs=0.01)


class TestCriterion3DGMGradientFidelity:
    def test_proxy_gradient_grid(self):
        with criterion(3, "proxy derivative matches FD on 10k grid, "
                          "positive, extrema on the lattice"):
            xs = np.linspace(0.0, 3.0, 10_000)
            step = xs[1] - xs[0]
            h = 1e-7
            for beta in (1.0, 2.0, 5.0, 10.0):
                fd = (dgm_soft_round(xs + h, beta)
                      - dgm_soft_round(xs - h, beta)) / (2 * h)
                an = dgm_grad(xs - np.floor(xs), beta)
                assert np.all(an > 0)
                rel = np.max(np.abs(an - fd) / np.abs(fd))
                assert rel < 1e-5, f"beta={beta}: rel err {rel:.2e}"
                x_min = xs[np.argmin(an)]
                x_max = xs[np.argmax(an)]
                assert min(abs(x_min - k) for k in range(4)) <= step
                assert min(abs(x_max - (k + 0.5)) for k in range(3)) <= step


class TestCriterion4SurrogateConsistency:
    def test_thousand_random_configurations(self):
        with criterion(4, "DGM fake-quantize grads match surrogate FD on "
                          "1000 random configurations"):
            rng = np.random.default_rng(2024)
            hx, hp = 1e-6, 1e-7
            for trial in range(1000):
                bits = int(rng.choice([3, 4, 6, 8]))
                beta = float(rng.uniform(0.5, 8.0))
                n_max = 2 ** bits - 1
                c = int(rng.integers(1, 4))
                shape = (2, c, 3, 2)
                s = rng.uniform(0.05, 0.3, c)
                z = rng.uniform(0.0, n_max, c)
                u = rng.uniform(-1.5, n_max + 1.5, shape)
                for edge in (0.0, float(n_max)):   # stay off the clip kinks
                    near = np.abs(u - edge) < 5e-3
                    u[near] = edge + np.sign(u[near] - edge + 1e-12) * 5e-3
                x = (u - z.reshape(1, c, 1, 1)) * s.reshape(1, c, 1, 1)

                p = params_from(s, z, bits, axis=1)
                proj = rng.standard_normal(shape)
                xt = ad.tensor(x.copy(), requires_grad=True, dtype=np.float64)
                out = fake_quantize(xt, p, DGM(beta))
                ad.backward(ad.sum_(out * ad.tensor(proj, dtype=np.float64)))

                raw, zv = p.s_raw.data, p.z.data
                fd_x = (surrogate_forward(x + hx, raw, zv, bits, 1, beta)
                        - surrogate_forward(x - hx, raw, zv, bits, 1, beta)) / (2 * hx)
                np.testing.assert_allclose(xt.grad, fd_x * proj,
                                           rtol=1e-4, atol=1e-7,
                                           err_msg=f"x-grad trial {trial}")

                def loss(ra, za):
                    return float((surrogate_forward(x, ra, za, bits, 1, beta)
                                  * proj).sum())

                for i in range(c):
                    d = np.zeros(c)
                    d[i] = hp
                    fd_s = (loss(raw + d, zv) - loss(raw - d, zv)) / (2 * hp)
                    fd_z = (loss(raw, zv + d) - loss(raw, zv - d)) / (2 * hp)
                    assert p.s_raw.grad[i] == pytest.approx(fd_s, rel=1e-4, abs=1e-6), \
                        f"s-grad trial {trial} ch {i}"
                    assert p.z.grad[i] == pytest.approx(fd_z, rel=1e-4, abs=1e-6), \
                        f"z-grad trial {trial} ch {i}"


class TestCriterion5RoundTripBound:
    def test_million_samples(self):
        with criterion(5, "|fake_quantize(x) - x| <= s/2 on 1e6 in-range samples"):
            rng = np.random.default_rng(77)
            violations = 0
            for bits in (4, 6, 8, 10):
                n_max = 2 ** bits - 1
                channels, per = 50, 5000
                s = rng.uniform(0.01, 0.5, channels)
                z = rng.uniform(0.0, n_max, channels)
                p = params_from(s, z, bits, axis=0)
                u = rng.uniform(0.0, n_max, (channels, per))
                x = (u - z[:, None]) * s[:, None]
                out = fake_quantize(ad.tensor(x, dtype=np.float64), p).data
                bound = (s[:, None] / 2) * (1 + 1e-9)
                violations += int(np.sum(np.abs(out - x) > bound))
            assert violations == 0


class TestCriterion6GumbelStatistics:
    def test_hard_one_hot_and_frequencies(self):
        with criterion(6, "hard Gumbel draws exactly one-hot; frequencies "
                          "within 0.02 of softmax target"):
            rng = np.random.default_rng(31337)
            target = np.array([0.7, 0.2, 0.1])
            logits = Tensor(np.log(np.tile(target, (10_000, 1))))
            out = gumbel_softmax(logits, tau=1.0, hard=True, rng=rng).data
            assert np.all((out == 0.0) | (out == 1.0))
            assert np.all(out.sum(axis=-1) == 1.0)
            np.testing.assert_allclose(out.mean(axis=0), target, atol=0.02)


class TestCriterion7BitsLossArithmetic:
    def test_worked_examples_and_bounds(self):
        with criterion(7, "expected-bit-width loss arithmetic and bounds"):
            one_hot = np.zeros((1, 2, 3), dtype=np.float64)
            one_hot[0, 0, 2] = 1.0
            one_hot[0, 1, 0] = 1.0
            assert bits_loss(Tensor(one_hot, dtype=np.float64),
                             (4, 6, 8)).item() == pytest.approx(6.0, rel=1e-9)
            uniform = np.full((1, 5, 3), 1 / 3, dtype=np.float64)
            assert bits_loss(Tensor(uniform, dtype=np.float64),
                             (6, 8, 10)).item() == pytest.approx(8.0, rel=1e-9)
            single = np.array([[[0.2, 0.3, 0.5]]], dtype=np.float64)
            assert bits_loss(Tensor(single, dtype=np.float64),
                             (4, 6, 8)).item() == pytest.approx(6.6, rel=1e-9)

            rng = np.random.default_rng(9)
            raw = rng.random((10_000, 3, 3))
            probs = raw / raw.sum(axis=-1, keepdims=True)
            from dynaquant.selector import effective_bits
            per_matrix = ad.mean(effective_bits(
                Tensor(probs, dtype=np.float64), (4, 6, 8)), axis=1).data
            assert per_matrix.shape == (10_000,)
            assert np.all(per_matrix >= 4.0 - 1e-9)
            assert np.all(per_matrix <= 8.0 + 1e-9)
            total = bits_loss(Tensor(probs, dtype=np.float64), (4, 6, 8)).item()
            assert total == pytest.approx(float(per_matrix.mean()), rel=1e-9)


class TestCriterion8GammaPressure:
    def test_gamma_pressure(self):
        with criterion(8, "gamma=0.1 lowers mean final bit-width vs gamma=0; "
                          "gamma=1.0 collapses to min(B) within 2000 steps"):
            data = synthetic_dataset(**EXP_DATASET)
            final_b = {}
            for gamma in (0.0, 0.1):
                bs = []
                for seed in EXP_SEEDS:
                    tr = Trainer(exp_config(gamma=gamma, seed=seed), data)
                    tr.run(600)
                    bs.append(evaluate_model(tr.model, data).avg_bits_dynamic)
                final_b[gamma] = float(np.mean(bs))
            print(f"\n  mean final b: gamma=0 -> {final_b[0.0]:.3f}, "
                  f"gamma=0.1 -> {final_b[0.1]:.3f}")
            assert final_b[0.1] < final_b[0.0]

            for seed in EXP_SEEDS:
                tr = Trainer(exp_config(gamma=1.0, seed=seed, steps=2000), data)
                reached = None
                for s in range(2000):
                    tr.train_step()
                    if (s + 1) % 50 == 0:
                        res = evaluate_model(tr.model, data)
                        at_min = all(set(c) == {4} for c in
                                     res.bit_histogram.values() if c)
                        if at_min:
                            reached = s + 1
                            break
                print(f"  gamma=1.0 seed={seed}: min(B) on every layer "
                      f"at step {reached}")
                assert reached is not None and reached <= 2000


class TestCriterion9DGMvsSTE:
    def test_dgm_vs_ste_suite(self, tmp_path):
        with criterion(9, "DGM final loss <= STE in at least 2 of 3 shared "
                          "seeds via cmd_ablate"):
            cfg_path = tmp_path / "ablate.cfg"
            cfg_path.write_text(EXP_CFG_TEXT)
            out = tmp_path / "ablation"
            rc = cli_main(["ablate", "dgm-vs-ste", "--config", str(cfg_path),
                           "--out", str(out)])
            assert rc == 0
            cells = json.loads((out / "ablation_dgm-vs-ste.json").read_text())
            by_row = {c["row"]: c for c in cells}
            assert by_row["ste"]["status"] == "ok"
            assert by_row["dgm"]["status"] == "ok"
            ste = {f["seed"]: f["rd_loss"] for f in by_row["ste"]["per_seed"]}
            dgm = {f["seed"]: f["rd_loss"] for f in by_row["dgm"]["per_seed"]}
            wins = sum(dgm[s] <= ste[s] for s in EXP_SEEDS)
            print(f"\n  per-seed rd-loss: " + ", ".join(
                f"seed {s}: ste={ste[s]:.4f} dgm={dgm[s]:.4f}" for s in EXP_SEEDS))
            assert wins >= 2, f"DGM won only {wins}/3 seeds"
            # table and per-seed traces are emitted
            assert (out / "ablation_dgm-vs-ste.txt").is_file()
            assert (out / "ablation_dgm-vs-ste.csv").is_file()
            traces = list((out / "traces").glob("*.csv"))
            assert len(traces) == 2 * len(EXP_SEEDS)


class TestCriterion10BDRateOracle:
    def test_bd_rate_equivalence(self):
        with criterion(10, "BD-rate: 0 on identical, +100 on doubled, matches "
                           "dense integration oracle"):
            from test_metrics import bd_rate_oracle, synth_curve

            rng = np.random.default_rng(123)
            c = synth_curve(rng, n=5)
            assert bd_rate(c, c) == pytest.approx(0.0, abs=1e-9)
            doubled = RDCurve([(p.bpp * 2, p.psnr_db) for p in c.points])
            assert bd_rate(c, doubled) == pytest.approx(100.0, abs=0.01)
            for _ in range(20):
                a = synth_curve(rng, n=int(rng.integers(4, 7)))
                b = synth_curve(rng, n=int(rng.integers(4, 7)),
                                base_bpp=float(rng.uniform(0.08, 0.2)))
                got = bd_rate(a, b)
                want = bd_rate_oracle(a, b)
                assert got == pytest.approx(want, abs=max(1e-3 * abs(want), 1e-4))


SMOKE_CFG = """
run.kind = train
train.steps = 500
train.batch_size = 8
train.crop = 64
train.lr = 1e-4
train.lambda = 0.0067
train.gamma = 0.001
train.seed = 1
train.mode = dgm
quant.bits = 6,8,10
model.channels = 16,32
model.latent_channels = 32
data.kind = synthetic
data.count = 16
data.size = 64
data.seed = 7
"""


class TestCriterion11EndToEndSmoke:
    def test_train_eval_smoke(self, tmp_path):
        with criterion(11, "500-step training run: loss decreases, checkpoint "
                           "round-trips, eval selections deterministic"):
            run_dir = tmp_path / "run"
            cfg_path = tmp_path / "run.cfg"
            cfg_path.write_text(SMOKE_CFG + f"run.out_dir = {run_dir}\n")
            assert cli_main(["train", str(cfg_path)]) == 0

            trace = (run_dir / "trace.csv").read_text().splitlines()
            first = float(trace[1].split(",")[1])
            last = float(trace[-1].split(",")[1])
            print(f"\n  loss: step 0 = {first:.4f}, step 499 = {last:.4f}")
            assert last < first

            # bit-exact checkpoint round trip: load then re-save
            ck = run_dir / "checkpoint.dqnt"
            tr = load_checkpoint(ck)
            resaved = tmp_path / "resaved.dqnt"
            save_checkpoint(tr, resaved)
            assert ck.read_bytes() == resaved.read_bytes()

            img_dir = tmp_path / "imgs"
            assert cli_main(["synth", "--count", "4", "--size", "64",
                             "--seed", "21", "--out", str(img_dir)]) == 0
            evals = []
            for name in ("e1", "e2"):
                assert cli_main(["eval", str(ck), str(img_dir),
                                 "--out", str(tmp_path / name)]) == 0
                evals.append(json.loads(
                    (tmp_path / name / "eval.json").read_text()))
            for img1, img2 in zip(evals[0]["images"], evals[1]["images"]):
                assert img1["bits"] == img2["bits"]
                assert img1["bits"], "no per-layer selections emitted"
            assert evals[0] == evals[1]
