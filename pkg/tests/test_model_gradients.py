"""Whole-model gradient check at float64, where central differences are a reliable reference."""

import numpy as np
import pytest

from cleft.autograd import Variable, backward, no_grad, ops
from cleft.config import preset
from cleft.encoders import first_eos_positions, patchify, project
from cleft.model import TwoTowerModel
from cleft.objectives import info_nce_symmetric

EPS = 1e-5
# rounding in the differences is about 1e-11 here, so a tiny absolute floor keeps the test strict
RTOL, ATOL = 1e-5, 1e-9


def central_differences(evaluate, x, coords):
    out = []
    with no_grad():
        for i in coords:
            xp, xm = x.copy(), x.copy()
            xp.flat[i] += EPS
            xm.flat[i] -= EPS
            out.append((evaluate(xp) - evaluate(xm)) / (2 * EPS))
    return np.array(out)


def f64_case(seed):
    cfg = preset("toy")
    model = TwoTowerModel(cfg.model_config(20), seed, np.float64)
    rng = np.random.default_rng([seed, 7])
    images = rng.normal(size=(4, cfg.image_size, cfg.image_size, cfg.channels))
    ids = rng.integers(3, 20, size=(4, 8))
    ids[:, 6] = 2
    ids[:, 7] = 0
    patches = patchify(images, cfg.patch_size)
    eos = first_eos_positions(ids, 2)
    pad = ids == 0
    with no_grad():
        emb = model.text.embed_ids(ids).value

    def loss(p, e):
        img = project(ops.mean(model.vision.tokens_from_patches(p), axis=1), model.image_head).vector
        txt = project(model.text.pool(model.text.hidden_states(e, pad), eos), model.text_head).vector
        return info_nce_symmetric(img, txt, model.temperature).total

    return model, loss, patches, emb


@pytest.mark.parametrize("seed", range(2))
def test_inputs(seed):
    _, loss, patches, emb = f64_case(seed)
    for x, f in ((patches, lambda v: loss(v, Variable(emb))), (emb, lambda v: loss(Variable(patches), v))):
        v = Variable(x.copy(), requires_grad=True)
        backward(f(v))
        fd = central_differences(lambda a: float(f(Variable(a)).value), x, range(x.size))
        np.testing.assert_allclose(v.grad.reshape(-1), fd, rtol=RTOL, atol=ATOL)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(2))
def test_every_parameter(seed):
    model, loss, patches, emb = f64_case(seed)

    def run():
        return loss(Variable(patches), Variable(emb))

    backward(run())
    grads = {n: e.var.grad.copy() for n, e in model.store.items()}
    pick = np.random.default_rng(seed)
    for name, entry in model.store.items():
        # the lookup table is bypassed: the check feeds embeddings directly
        if name == "text.tok_emb":
            continue
        var = entry.var
        original = var.value.copy()
        coords = pick.choice(var.value.size, size=min(8, var.value.size), replace=False)

        def evaluate(arr):
            var.value = arr
            return float(run().value)

        try:
            fd = central_differences(evaluate, original, coords)
        finally:
            var.value = original
        np.testing.assert_allclose(grads[name].reshape(-1)[coords], fd, rtol=RTOL, atol=ATOL, err_msg=name)


def test_key_bias_gradient_is_exactly_zero():
    # a key bias shifts every score in a softmax row by the same amount
    model, loss, patches, emb = f64_case(0)
    backward(loss(Variable(patches), Variable(emb)))
    biases = [e.var for n, e in model.store.items() if n.endswith("attn.k.b")]
    assert len(biases) == 4
    assert max(np.abs(b.grad).max() for b in biases) <= 1e-15
