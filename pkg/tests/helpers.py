import numpy as np

from saic.model import ModelConfig, init_params


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=7, d_feat=5, layers=2, d_model=8, d_ff=12, heads=2, rpr_window=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_params(cfg, seed=0, scale=3.0):
    """Random params with larger-than-init spread so outputs are far from uniform."""
    P = init_params(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1000)
    return {k: (v * scale if not k.endswith((".g", ".b")) else v + 0.1 * rng.normal(size=v.shape))
            for k, v in P.items()}


def fd_rel_error(loss_fn, params: dict, h=1e-5) -> float:
    """Max over parameters of |analytic - central difference| / max magnitude."""
    for p in params.values():
        p.zero_grad()
    from saic import nn

    nn.backward(loss_fn())
    worst = 0.0
    for p in params.values():
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            dn = float(loss_fn().data)
            flat[i] = old
            num[i] = (up - dn) / (2 * h)
        g = p.grad.reshape(-1)
        scale = max(np.abs(num).max(), np.abs(g).max(), 1e-6)
        worst = max(worst, np.abs(num - g).max() / scale)
    return worst
