"""Full-loss finite-difference error across tiny instances and step sizes.

The relative measure |a - n| / (|a| + 1e-8) has a roundoff floor of roughly
eps * |loss| / h in absolute terms, so coordinates whose true gradient is
below ~1e-7 cannot pass 1e-4 at h = 1e-5. This prints the worst relative
error per instance and the coordinate responsible.
"""
import argparse

import numpy as np

from convemo import numerics as nx
from convemo.gradcheck import tiny_instance
from convemo.head_loss import self_supervised_loss
from convemo.model import forward, init_model, joint_loss


def worst_coordinate(seed, h):
    with nx.default_dtype("float64"):
        rng, header, batch, cfg = tiny_instance(seed)
        params = init_model(cfg, header, rng)
        params.encoding.speaker.data[...] = rng.normal(size=params.encoding.speaker.shape)
        cw = np.array([0.5, 1.0, 1.5])
        with nx.no_grad():
            probs = forward(params, batch, cfg).modality_probs()
        frozen = self_supervised_loss(probs, batch.labels, batch.label_mask, cfg.msl_factor,
                                      return_weights=True)[1]

        def loss():
            return joint_loss(forward(params, batch, cfg), batch, cw, cfg.msl_factor, frozen)

        named = list(params.named_parameters())
        for _, t in named:
            t.requires_grad, t.grad = True, None
        L = loss()
        nx.backward(L)
        worst = (0.0, "", 0.0, 0.0)
        with nx.no_grad():
            for name, t in named:
                flat = t.data.reshape(-1)
                an = np.zeros(flat.size) if t.grad is None else t.grad.reshape(-1)
                for i in range(flat.size):
                    o = flat[i]
                    flat[i] = o + h
                    fp = loss().item()
                    flat[i] = o - h
                    fm = loss().item()
                    flat[i] = o
                    num = (fp - fm) / (2 * h)
                    err = abs(an[i] - num) / (abs(an[i]) + 1e-8)
                    if err > worst[0]:
                        worst = (err, f"{name}[{i}]", an[i], num)
        return L.item(), worst


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    ap.add_argument("--steps", default="1e-5,1e-4")
    args = ap.parse_args()
    for seed in map(int, args.seeds.split(",")):
        for h in map(float, args.steps.split(",")):
            L, (err, where, an, num) = worst_coordinate(seed, h)
            print(f"seed {seed} h={h:g} loss {L:.3f}: worst {err:.2e} at {where} "
                  f"(analytic {an:.3e}, numeric {num:.3e})")


if __name__ == "__main__":
    main()
