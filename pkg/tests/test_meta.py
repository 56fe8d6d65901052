import dataclasses
import hashlib

import numpy as np
import pytest

from crossrec import autodiff as ad
from crossrec import meta
from crossrec.autodiff import Tensor
from crossrec.backbone import EncoderConfig, init_parameters
from crossrec.data import DomainDataset
from crossrec.meta import (MetaConfig, inner_adapt, joint_train_iteration,
                           meta_gradient, rescale_and_update, train_iteration)
from crossrec.objective import ModelConfig, VQConfig, batch_loss

from oracles import rel_err

CFG = MetaConfig(inner_lr=0.1, outer_lr=0.1, inner_steps=1)


def quadratic_towards(c):
    """params -> sum((w - c)^2) as a recorded scalar."""
    def fn(p):
        return ad.sum(ad.square(ad.add_scalar(p["w"], -c)))
    return fn


def checksum(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


# -------------------------------------------------------------- inner loop

def test_inner_adapt_zero_lr_is_identity():
    theta = {"w": Tensor(np.array([1.5, -2.0]))}
    cfg = dataclasses.replace(CFG, inner_lr=0.0)
    adapted = inner_adapt(theta, [quadratic_towards(1.0)], cfg)
    assert np.array_equal(adapted.phi["w"].data, theta["w"].data)


def test_inner_adapt_scalar_quadratic_step():
    theta = {"w": Tensor(np.array([0.0]))}
    adapted = inner_adapt(theta, [quadratic_towards(1.0)], CFG)
    # w - 0.1 * 2(w - 1) = 0.2
    assert adapted.phi["w"].data[0] == pytest.approx(0.2, abs=1e-12)
    assert adapted.inner_losses == [pytest.approx(1.0)]


@pytest.mark.parametrize("second_order", [True, False])
def test_inner_losses_monotonic_on_convex_quadratic(second_order):
    theta = {"w": Tensor(np.array([3.0, -1.0, 0.5]))}
    cfg = dataclasses.replace(CFG, inner_steps=6, second_order=second_order)
    adapted = inner_adapt(theta, [quadratic_towards(1.0)] * 6, cfg)
    assert all(b <= a + 1e-12 for a, b in
               zip(adapted.inner_losses, adapted.inner_losses[1:]))


def test_inner_adapt_never_mutates_theta():
    theta = {"w": Tensor(np.array([0.7, 0.3]))}
    before = checksum(theta)
    for so in (True, False):
        cfg = dataclasses.replace(CFG, inner_steps=3, second_order=so)
        inner_adapt(theta, [quadratic_towards(2.0)] * 3, cfg)
        assert checksum(theta) == before


# ----------------------------------------------------------- meta gradient

def meta_square(p):
    return ad.sum(ad.square(p["w"]))


def test_meta_gradient_scalar_chain_exact_and_first_order():
    for second_order, expected in ((True, 0.32), (False, 0.4)):
        cfg = dataclasses.replace(CFG, second_order=second_order)
        theta = {"w": Tensor(np.array([0.0]))}
        adapted = inner_adapt(theta, [quadratic_towards(1.0)], cfg)
        grads, loss = meta_gradient(theta, adapted, meta_square, cfg)
        assert grads["w"][0] == pytest.approx(expected, abs=1e-10)
        assert loss == pytest.approx(0.04)


def test_meta_gradient_mode_mismatch_rejected():
    theta = {"w": Tensor(np.array([0.0]))}
    adapted = inner_adapt(theta, [quadratic_towards(1.0)], CFG)
    with pytest.raises(ValueError, match="mode"):
        meta_gradient(theta, adapted, meta_square,
                      dataclasses.replace(CFG, second_order=False))


def test_zero_inner_lr_collapses_modes():
    for so in (True, False):
        cfg = dataclasses.replace(CFG, inner_lr=0.0, second_order=so)
        theta = {"w": Tensor(np.array([0.3, -0.8]))}
        adapted = inner_adapt(theta, [quadratic_towards(1.0)], cfg)
        grads, _ = meta_gradient(theta, adapted, meta_square, cfg)
        assert np.allclose(grads["w"], 2 * theta["w"].data, atol=1e-12)


def random_tiny_case(seed, inner_steps):
    """A <=50-parameter model with random quadratic inner/meta losses."""
    rng = np.random.default_rng(seed)
    theta = {"a": Tensor(rng.standard_normal(4)),
             "b": Tensor(rng.standard_normal((3, 3)))}
    targets = [
        {k: rng.standard_normal(v.data.shape) for k, v in theta.items()}
        for _ in range(inner_steps)
    ]
    mix = {k: rng.standard_normal(v.data.shape) for k, v in theta.items()}

    def step_fn(t):
        def fn(p):
            parts = [ad.sum(ad.square(ad.sub(p[k], ad.Tensor(t[k]))))
                     for k in sorted(p)]
            out = parts[0]
            for extra in parts[1:]:
                out = ad.add(out, extra)
            return out
        return fn

    def meta_fn(p):
        parts = [ad.sum(ad.square(ad.mul(p[k], ad.Tensor(mix[k]))))
                 for k in sorted(p)]
        out = parts[0]
        for extra in parts[1:]:
            out = ad.add(out, extra)
        return out

    return theta, [step_fn(t) for t in targets], meta_fn


def pipeline_value(theta_arrays, names, step_fns, meta_fn, cfg):
    theta = {k: Tensor(a) for k, a in zip(names, theta_arrays)}
    adapted = inner_adapt(theta, step_fns, cfg)
    with ad.Tape():
        return float(meta_fn(adapted.phi).data)


@pytest.mark.parametrize("seed,steps", [(s, 1 + s % 2) for s in range(6)])
def test_exact_meta_gradient_matches_pipeline_fd(seed, steps):
    cfg = dataclasses.replace(CFG, inner_steps=steps)
    theta, step_fns, meta_fn = random_tiny_case(seed, steps)
    adapted = inner_adapt(theta, step_fns, cfg)
    grads, _ = meta_gradient(theta, adapted, meta_fn, cfg)
    names = sorted(theta)
    step = 1e-6
    for name in names:
        fd = np.zeros_like(theta[name].data)
        it = np.nditer(fd, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            arrs = {k: theta[k].data.copy() for k in names}
            arrs[name][i] += step
            up = pipeline_value([arrs[k] for k in names], names, step_fns,
                                meta_fn, cfg)
            arrs[name][i] -= 2 * step
            dn = pipeline_value([arrs[k] for k in names], names, step_fns,
                                meta_fn, cfg)
            fd[i] = (up - dn) / (2 * step)
        assert rel_err(grads[name], fd) < 1e-5, name


# -------------------------------------------------------------- rescaling

def task_with(phi_delta, grad, theta):
    phi = {k: Tensor(theta[k].data + phi_delta[k]) for k in theta}
    return (phi, {k: np.asarray(grad[k], dtype=np.float64) for k in theta})


def test_identical_tasks_give_uniform_weights_and_plain_step():
    rng = np.random.default_rng(0)
    theta = {"w": Tensor(rng.standard_normal(5))}
    g = {"w": rng.standard_normal(5)}
    d = {"w": rng.standard_normal(5)}
    tasks = [task_with(d, g, theta)] * 3
    new, scores, weights = rescale_and_update(theta, tasks, CFG)
    assert weights["w"] == pytest.approx([1 / 3] * 3, abs=1e-12)
    assert np.allclose(new["w"].data, theta["w"].data - CFG.outer_lr * g["w"])


def test_opposed_task_downweighted_by_softmax():
    theta = {"w": Tensor(np.zeros(4))}
    g = {"w": np.array([1.0, 2.0, -1.0, 0.5])}
    aligned = task_with({"w": g["w"]}, g, theta)       # cos = +1
    opposed = task_with({"w": -g["w"]}, g, theta)      # cos = -1
    _, scores, weights = rescale_and_update(theta, [aligned, opposed], CFG)
    assert scores["w"] == pytest.approx([1.0, -1.0], abs=1e-12)
    e2 = np.exp(2.0)
    assert weights["w"] == pytest.approx([e2 / (e2 + 1), 1 / (e2 + 1)])
    assert weights["w"] == pytest.approx([0.8808, 0.1192], abs=5e-5)


def test_weights_positive_and_normalized():
    rng = np.random.default_rng(9)
    theta = {"a": Tensor(rng.standard_normal(3)),
             "b": Tensor(rng.standard_normal((2, 2)))}
    tasks = [task_with({k: rng.standard_normal(v.data.shape) for k, v in theta.items()},
                       {k: rng.standard_normal(v.data.shape) for k, v in theta.items()},
                       theta)
             for _ in range(4)]
    _, _, weights = rescale_and_update(theta, tasks, CFG)
    for w in weights.values():
        assert all(x > 0 for x in w)
        assert abs(sum(w) - 1.0) <= 1e-12


def test_temperature_limits():
    rng = np.random.default_rng(2)
    theta = {"w": Tensor(rng.standard_normal(6))}
    tasks = [task_with({"w": rng.standard_normal(6)},
                       {"w": rng.standard_normal(6)}, theta)
             for _ in range(3)]
    _, scores, _ = rescale_and_update(theta, tasks, CFG)
    assert len(set(np.round(scores["w"], 6))) == 3  # distinct scores
    _, _, sharp = rescale_and_update(
        theta, tasks, dataclasses.replace(CFG, temperature=1e-3))
    assert max(sharp["w"]) >= 0.99
    _, _, flat = rescale_and_update(
        theta, tasks, dataclasses.replace(CFG, temperature=1e3))
    assert all(abs(x - 1 / 3) <= 1e-3 for x in flat["w"])


def test_zero_outer_lr_keeps_theta_bit_identical():
    rng = np.random.default_rng(5)
    theta = {"w": Tensor(rng.standard_normal(4))}
    tasks = [task_with({"w": rng.standard_normal(4)},
                       {"w": rng.standard_normal(4)}, theta)]
    cfg = dataclasses.replace(CFG, outer_lr=0.0)
    new, _, _ = rescale_and_update(theta, tasks, cfg)
    assert new["w"].data.tobytes() == theta["w"].data.tobytes()


def test_layer_name_mismatch_rejected():
    theta = {"w": Tensor(np.zeros(2))}
    bad = ({"v": Tensor(np.zeros(2))}, {"v": np.zeros(2)})
    with pytest.raises(ValueError, match="layer-name"):
        rescale_and_update(theta, [bad], CFG)


# ------------------------------------------------------- full iterations

def tiny_world(seed=0):
    enc = EncoderConfig(d_model=4, num_blocks=1, max_len=5)
    mc = ModelConfig(encoder=enc, vq=VQConfig(enabled=True, heads=2),
                     target_domain="target")
    sources = [
        DomainDataset("src0", 5, train=[[0, 1, 2], [3, 4, 0]],
                      val=[3, 1], test=[4, 2]),
        DomainDataset("src1", 4, train=[[2, 0, 1], [1, 3]],
                      val=[3, 0], test=[0, 2]),
    ]
    target = DomainDataset("target", 6, train=[[0, 1, 2, 3], [4, 5, 0]],
                           val=[4, 1], test=[5, 2])
    counts = {d.domain_id: d.item_count for d in sources + [target]}
    params = init_parameters(enc, counts, seed)
    return params, sources, target, mc


def run_once(seed, **over):
    params, sources, target, mc = tiny_world()
    cfg = dataclasses.replace(MetaConfig(inner_steps=2, inner_batch=4,
                                         meta_batch=4), **over)
    rng = np.random.default_rng(seed)
    new, report = train_iteration(params, sources, target, mc, cfg, rng)
    return params, new, report


def test_train_iteration_deterministic():
    _, a, ra = run_once(7)
    _, b, rb = run_once(7)
    assert sorted(a) == sorted(b)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    assert ra.layer_weights == rb.layer_weights
    assert ra.overall_loss == rb.overall_loss
    assert [t.source_domain for t in ra.tasks] == [t.source_domain for t in rb.tasks]


def test_train_iteration_reports_and_theta_untouched():
    params, new, report = run_once(3)
    before = checksum(params)
    assert len(report.tasks) == 3
    for w in report.layer_weights.values():
        assert abs(sum(w) - 1.0) <= 1e-12
    assert report.overall_loss == pytest.approx(
        np.mean([t.meta_loss for t in report.tasks]))
    assert checksum(params) == before
    assert any(new[k].data.tobytes() != params[k].data.tobytes() for k in params)


def test_train_iteration_uniform_when_rescale_off():
    params, sources, target, mc = tiny_world()
    cfg = MetaConfig(inner_steps=1, inner_batch=4, meta_batch=4)
    _, report = train_iteration(params, sources, target, mc, cfg,
                                np.random.default_rng(1), rescale=False)
    for w in report.layer_weights.values():
        assert w == [1 / 3] * 3


def test_train_iteration_parallel_matches_serial(monkeypatch):
    monkeypatch.setenv("METAREC_THREADS", "2")
    params, sources, target, mc = tiny_world()
    cfg = MetaConfig(inner_steps=2, inner_batch=4, meta_batch=4)
    a, _ = train_iteration(params, sources, target, mc, cfg,
                           np.random.default_rng(5), parallel=False)
    b, _ = train_iteration(params, sources, target, mc, cfg,
                           np.random.default_rng(5), parallel=True)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()


def test_train_iteration_requires_sources():
    params, _, target, mc = tiny_world()
    with pytest.raises(ValueError, match="source"):
        train_iteration(params, [], target, mc, MetaConfig(),
                        np.random.default_rng(0))


# ----------------------------------------------------------- joint baseline

def test_joint_single_domain_is_plain_sgd():
    params, _, target, mc = tiny_world()
    cfg = MetaConfig(inner_batch=4)
    new, loss = joint_train_iteration(params, [], target, mc, cfg,
                                      np.random.default_rng(11))
    # independent recomputation: one recorded step on the same sampled batch
    from crossrec.data import sample_batch
    batch = sample_batch(target, "train", cfg.inner_batch,
                         mc.encoder.max_len, np.random.default_rng(11))
    names = sorted(params)
    with ad.Tape():
        ref_loss = batch_loss(params, batch, mc, include_vq=True)[0]
        grads = ad.grad(ref_loss, [params[k] for k in names])
    assert loss == pytest.approx(float(ref_loss.data), abs=1e-12)
    for k, g in zip(names, grads):
        assert np.allclose(new[k].data,
                           params[k].data - cfg.outer_lr * g.data, atol=1e-15)


def test_joint_gradient_is_mean_over_domains():
    params, sources, target, mc = tiny_world()
    cfg = MetaConfig(inner_batch=4)
    new, _ = joint_train_iteration(params, sources, target, mc, cfg,
                                   np.random.default_rng(2))
    from crossrec.data import sample_batch
    rng = np.random.default_rng(2)
    batches = [sample_batch(d, "train", cfg.inner_batch, mc.encoder.max_len, rng)
               for d in sources + [target]]
    names = sorted(params)
    accum = {k: np.zeros_like(params[k].data) for k in names}
    for b in batches:
        with ad.Tape():
            loss = batch_loss(params, b, mc, include_vq=True)[0]
            grads = ad.grad(loss, [params[k] for k in names])
        for k, g in zip(names, grads):
            accum[k] += g.data / len(batches)
    for k in names:
        assert np.allclose(new[k].data,
                           params[k].data - cfg.outer_lr * accum[k], atol=1e-12)


def test_joint_training_loss_decreases():
    params, sources, target, mc = tiny_world(seed=4)
    cfg = MetaConfig(inner_batch=8, outer_lr=0.2)
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(50):
        params, loss = joint_train_iteration(params, sources, target, mc,
                                             cfg, rng)
        losses.append(loss)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


# ----------------------------------------------------------- config checks

def test_meta_config_validation():
    with pytest.raises(ValueError, match="temperature"):
        MetaConfig(temperature=0.0)
    with pytest.raises(ValueError, match="inner_lr"):
        MetaConfig(inner_lr=-0.1)
    MetaConfig(inner_lr=0.0, outer_lr=0.0)  # zero rates are legal limits
