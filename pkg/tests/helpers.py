"""Shared finite-difference probes for model-sized parameter sets."""
import numpy as np

from streamcast import diffmath as dm


def _central(f, flat, i, step):
    orig = flat[i]
    with dm.no_grad():
        flat[i] = orig + step
        hi = f().item()
        flat[i] = orig - step
        lo = f().item()
    flat[i] = orig
    return (hi - lo) / (2 * step)


def probe_params(f, tensors, rng, per_tensor=4, step=1e-5, floor=1e-5, tol=1e-4):
    """Max relative error of backward() against central differences on sampled entries.

    ``floor`` bounds the denominator: gradients that are exactly zero (key
    biases under softmax) show ~1e-10 of rounding noise in the numeric probe.
    An entry above ``tol`` is re-probed with a 10x smaller step and keeps the
    smaller error: a probe straddling a ReLU or |x| kink recovers, while a
    wrong gradient fails at both steps.
    """
    grads = dm.backward(f())
    worst = 0.0
    for p in tensors:
        flat = p.data.reshape(-1)
        g = grads.get(p, np.zeros_like(p.data)).reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            err = None
            for h in (step, step / 10):
                num = _central(f, flat, i, h)
                e = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
                err = e if err is None else min(err, e)
                if err < tol:
                    break
            worst = max(worst, err)
    return worst


def tiny_config_tree(out, aggregators=("single", "topk", "nms", "kmeans", "learnagg"), window=10, seeds=(0,),
                     train=24, evaluate=6, ensemble=2, **generator):
    """A JSON config tree small enough for end-to-end CLI runs in seconds."""
    return {
        "generator": {"ensemble_frames": window, **generator},
        "encoder": {"width": 16, "heads": 2, "bands": 2, "temporal_layers": 1, "map_layers": 1, "agent_layers": 1},
        "decoder": {"width": 16, "heads": 2, "modes": 3, "layers": 1},
        "train": {"epochs": 1, "finetune_epochs": 1, "batch_size": 8},
        "schedule": {"window": window, "anchors_per_episode": 2},
        "data": {"train_episodes": train, "eval_episodes": evaluate},
        "aggregators": list(aggregators),
        "seeds": list(seeds),
        "ensemble_models": ensemble,
        "out": str(out),
    }
