"""Property suites shared by the check command and the test suite.

Three suites: finite-difference gradient checks over every
differentiable operation and the full model loss in each pooling
mode; Newton-Schulz square-root accuracy against a hand-written
Jacobi eigendecomposition oracle; exact pooling reduction identities.

All suites run in float64 regardless of the ambient default dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (AttentionStack, KeypointTargets, bce_loss,
                        multiscale_attention_loss, total_loss,
                        variance_regularizer)
from .linalg import add_ridge, eig_sqrt_oracle, jacobi_eigh, ns_sqrt, random_spd
from .model import Model, ModelConfig
from .pooling import avg_pool, avg_pr_pool, cov_pool, expand
from .tensor import Tensor, grad_check, using_dtype

# iteration count at which the Newton-Schulz recursion has converged
# for cond <= 1e3 spectra; 5 iterations leave a percent-level floor
CONVERGED_ITERS = 14
FIVE_ITER_ENVELOPE = 0.12


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool

    @staticmethod
    def below(name: str, value: float, threshold: float) -> "CheckResult":
        return CheckResult(name, float(value), threshold, bool(value < threshold))

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.value:.3e} (threshold {self.threshold:.0e})"


def _model_param_slots(model: Model):
    """(owner, attribute, parameter name) for every learned tensor."""
    slots = []
    for i, block in enumerate(model.blocks):
        slots.append((block, "kernel", f"backbone.block{i}.kernel"))
        slots.append((block, "bias", f"backbone.block{i}.bias"))
    if model.attention is not None:
        for tag, conv in (("conv1", model.attention.conv1),
                          ("conv2", model.attention.conv2)):
            slots.append((conv, "kernel", f"attention.{tag}.kernel"))
            slots.append((conv, "bias", f"attention.{tag}.bias"))
    if model.reduce is not None:
        slots.append((model.reduce, "weight", "reduce.weight"))
        slots.append((model.reduce, "bias", "reduce.bias"))
    slots.append((model.classifier, "weight", "classifier.weight"))
    slots.append((model.classifier, "bias", "classifier.bias"))
    return slots


def _model_loss_check(mode: str, tolerance: float, seed: int = 0) -> CheckResult:
    cfg = ModelConfig(num_classes=3, input_size=16, backbone_widths=(4, 6),
                      block_strides=(2, 2), pool_mode=mode, num_keypoints=2,
                      num_complementary=1, reduced_dim=3, ns_iters=5)
    model = Model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.random((2, 16, 16, 3))
    y = np.array([0, 2])
    k = cfg.num_keypoints
    hf = cfg.feature_hw
    tmaps = (rng.random((2, hf, hf, k)) > 0.7).astype(float)
    targets = KeypointTargets(tmaps, np.ones((2, k), bool), np.ones(2, bool))
    slots = _model_param_slots(model)

    def fn(**named):
        for owner, attr, name in slots:
            setattr(owner, attr, named[name])
        out = model.forward(Tensor(x))
        terms = total_loss(out.logits, y, out.stack,
                           targets if out.stack is not None else None)
        return terms.total

    inputs = {name: getattr(owner, attr).data for owner, attr, name in slots}
    rep = grad_check(fn, inputs, tolerance=tolerance, name=f"model_loss[{mode}]")
    return CheckResult(rep.name, rep.max_rel_error, tolerance, rep.passed)


def grad_suite(seed: int = 0) -> list[CheckResult]:
    """Finite-difference checks for ops and full model losses, float64."""
    results = []
    with using_dtype(np.float64):
        rng = np.random.default_rng(seed)

        def run(name, fn, inputs, tol=1e-4, symmetric=()):
            rep = grad_check(fn, inputs, tolerance=tol, name=name,
                             symmetric=symmetric)
            results.append(CheckResult(rep.name, rep.max_rel_error, tol, rep.passed))

        x = rng.standard_normal((2, 5, 6, 3))
        kern = rng.standard_normal((3, 3, 3, 4)) * 0.5
        bias = rng.standard_normal(4) * 0.1
        run("conv2d_same", lambda x, k, b: T.conv2d(x, k, b, stride=1, padding=1),
            {"x": x, "k": kern, "b": bias})
        run("conv2d_stride2", lambda x, k: T.conv2d(x, k, stride=2),
            {"x": x, "k": kern})
        # keep pool inputs away from ties
        xp = rng.standard_normal((2, 4, 4, 3)) * 3.0
        run("maxpool2x2", lambda x: T.maxpool2d(x, 2, stride=2), {"x": xp})
        run("maxpool3_same", lambda x: T.maxpool2d(x, 3, stride=1, same_pad=True),
            {"x": xp})
        run("sigmoid", lambda z: T.sigmoid(z), {"z": rng.standard_normal((3, 4))})
        tgt = (rng.random((3, 4)) > 0.5).astype(float)
        run("sigmoid_bce", lambda z: bce_loss(T.sigmoid(z), Tensor(tgt)),
            {"z": rng.standard_normal((3, 4))})
        tmap = np.zeros((4, 4)); tmap[1, 2] = 1.0
        run("multiscale_bce",
            lambda z: multiscale_attention_loss(T.sigmoid(z), Tensor(tmap)),
            {"z": rng.standard_normal((4, 4))})
        run("variance_reg", lambda z: variance_regularizer(T.sigmoid(z)),
            {"z": rng.standard_normal((3, 3))})

        f = rng.standard_normal((2, 3, 3, 4))
        a = rng.random((2, 3, 3, 2)) * 0.8 + 0.1
        def mk(a):
            return AttentionStack(a, 1, 1)
        run("expand", lambda f, a: expand(f, mk(a)), {"f": f, "a": a})
        run("avg_pool", lambda f: avg_pool(f), {"f": f})
        run("avg_pr_pool", lambda f, a: avg_pr_pool(expand(f, mk(a))),
            {"f": f, "a": a})
        run("cov_raw", lambda f: cov_pool(f, with_sqrt=False), {"f": f})
        spd = random_spd(4, rng, cond=50.0)
        run("ns_sqrt", lambda a: ns_sqrt(a), {"a": spd}, tol=1e-3, symmetric=("a",))
        run("cov_sqrt", lambda f, a: cov_pool(expand(f, mk(a))),
            {"f": f, "a": a}, tol=1e-3)

        logits = rng.standard_normal((4, 5))
        yl = np.array([0, 2, 4, 1])
        run("cross_entropy", lambda z: T.cross_entropy(z, yl), {"z": logits})
        run("softmax", lambda z: T.softmax(z, axis=1), {"z": logits})
        run("linear", lambda x, w, b: T.add(T.matmul(x, w), b),
            {"x": rng.standard_normal((3, 4)), "w": rng.standard_normal((4, 2)),
             "b": rng.standard_normal(2)})

        results.append(_model_loss_check("avg", 1e-4, seed))
        results.append(_model_loss_check("avg_pr", 1e-4, seed))
        results.append(_model_loss_check("cov", 1e-3, seed))
        results.append(_model_loss_check("cov_pr", 1e-3, seed))
    return results


def sqrt_suite(trials: int = 100, dim: int = 16, max_cond: float = 1e3,
               iters: int = 5, seed: int = 0) -> list[CheckResult]:
    """Newton-Schulz accuracy over random SPD matrices.

    Reports the worst relative Frobenius error of Y@Y - A at the
    requested iteration count and at the converged count, the worst
    symmetry defect, and the Jacobi oracle's own reconstruction error.
    The pass thresholds encode what the 5-iteration scheme actually
    delivers; the stricter 1e-3 bound holds only once converged.
    """
    worst_recon = 0.0
    worst_recon_conv = 0.0
    worst_sym = 0.0
    worst_oracle = 0.0
    worst_vs_oracle = 0.0
    with using_dtype(np.float64):
        rng = np.random.default_rng(seed)
        for _ in range(trials):
            cond = float(10.0 ** rng.uniform(0.0, np.log10(max_cond)))
            a = random_spd(dim, rng, cond=cond)
            fro = np.linalg.norm(a)

            y5 = ns_sqrt(Tensor(a), iters=iters).data
            yc = ns_sqrt(Tensor(a), iters=CONVERGED_ITERS).data
            oracle = eig_sqrt_oracle(a)

            worst_recon = max(worst_recon, np.linalg.norm(y5 @ y5 - a) / fro)
            worst_recon_conv = max(worst_recon_conv,
                                   np.linalg.norm(yc @ yc - a) / fro)
            worst_sym = max(worst_sym, np.abs(y5 - y5.T).max())
            worst_oracle = max(worst_oracle,
                               np.linalg.norm(oracle @ oracle - a) / fro)
            worst_vs_oracle = max(worst_vs_oracle,
                                  np.linalg.norm(y5 - oracle) / np.linalg.norm(oracle))
    return [
        CheckResult.below(f"sqrt_recon_{iters}it", worst_recon, FIVE_ITER_ENVELOPE),
        CheckResult.below(f"sqrt_recon_{CONVERGED_ITERS}it", worst_recon_conv, 1e-3),
        CheckResult.below("sqrt_symmetry_defect", worst_sym, 1e-6),
        CheckResult.below("oracle_recon", worst_oracle, 1e-9),
        CheckResult.below(f"sqrt_vs_oracle_{iters}it", worst_vs_oracle,
                          FIVE_ITER_ENVELOPE),
    ]


def pool_identity_suite(trials: int = 10, seed: int = 0) -> list[CheckResult]:
    """Exact reduction identities and structural pooling properties."""
    worst_mean = 0.0
    worst_cov = 0.0
    worst_perm_blocks = 0.0
    worst_perm_cov = 0.0
    min_eig = np.inf
    with using_dtype(np.float64):
        rng = np.random.default_rng(seed)
        for _ in range(trials):
            n = int(rng.integers(1, 4))
            h = int(rng.integers(2, 6))
            w = int(rng.integers(2, 6))
            d = int(rng.integers(2, 7))
            m = int(rng.integers(2, 5))
            f = Tensor(rng.standard_normal((n, h, w, d)))

            ones = AttentionStack(Tensor(np.ones((n, h, w, 1))), 1, 0)
            pr = avg_pr_pool(expand(f, ones)).data
            worst_mean = max(worst_mean,
                             float(np.abs(pr[:, :d] - avg_pool(f).data).max()))
            worst_cov = max(worst_cov,
                            float(np.abs(cov_pool(expand(f, ones)).data
                                         - cov_pool(f).data).max()))

            amap = Tensor(rng.random((n, h, w, m)))
            perm = rng.permutation(m)
            smap = AttentionStack(amap, m, 0)
            pmap = AttentionStack(Tensor(amap.data[..., perm]), m, 0)
            blocks = avg_pr_pool(expand(f, smap)).data.reshape(n, m, 2 * d)
            pblocks = avg_pr_pool(expand(f, pmap)).data.reshape(n, m, 2 * d)
            worst_perm_blocks = max(worst_perm_blocks,
                                    float(np.abs(blocks[:, perm] - pblocks).max()))
            cv = cov_pool(expand(f, smap)).data
            cvp = cov_pool(expand(f, pmap)).data
            worst_perm_cov = max(worst_perm_cov, float(np.abs(cv - cvp).max()))

            raw = cov_pool(expand(f, smap), with_sqrt=False).data
            for i in range(n):
                evals = np.linalg.eigvalsh(raw[i].reshape(d, d))
                min_eig = min(min_eig, float(evals.min()))
    return [
        CheckResult("avg_pr_mean_block_identity", worst_mean, 0.0, worst_mean == 0.0),
        CheckResult("cov_pr_identity", worst_cov, 0.0, worst_cov == 0.0),
        CheckResult.below("avg_pr_block_permutation", worst_perm_blocks, 1e-12),
        CheckResult.below("cov_pr_permutation_invariance", worst_perm_cov, 1e-12),
        CheckResult("ridged_covariance_psd", min_eig, -1e-10, min_eig >= -1e-10),
    ]


SUITES = {
    "grad": grad_suite,
    "sqrt": sqrt_suite,
    "pool-identities": pool_identity_suite,
}


def run_suites(names) -> tuple[list[CheckResult], bool]:
    results = []
    for name in names:
        results.extend(SUITES[name]())
    return results, all(r.passed for r in results)
