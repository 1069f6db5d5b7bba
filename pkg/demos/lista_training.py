"""Unroll ISTA into a 10-layer LISTA network, then train it.

The untrained network reproduces ten ISTA iterations exactly; training
then lowers the reconstruction error below both ISTA-10 and FISTA-10.
Run: python demos/lista_training.py   (a few minutes)
"""
import numpy as np

from sparseloc.model import MeasurementOperator, gradient_lipschitz
from sparseloc.solvers import IstaConfig, fista, ista
from sparseloc.train import OptimizerConfig, TrainSample, train_net
from sparseloc.unrolled import init_lista_from_model, lista_forward

a = np.random.default_rng(0).normal(size=(16, 64)) / 4
lf = gradient_lipschitz(a)


def pairs(n, seed):
    rng = np.random.default_rng(seed)
    x = np.zeros((n, 64))
    for row in x:
        row[rng.choice(64, 3, replace=False)] = rng.normal(size=3)
    return x @ a.T + 0.01 * rng.normal(size=(n, 16)), x


def nmse(pred, truth):
    return np.sum((pred - truth) ** 2) / np.sum(truth ** 2)


y_tr, x_tr = pairs(2000, 1)
y_te, x_te = pairs(200, 2)
for solver in (ista, fista):
    scores = {lam: nmse(np.stack([solver(a, y, IstaConfig(lam, 10), lf)[0] for y in y_te]), x_te)
              for lam in (0.01, 0.03, 0.1, 0.3, 1.0)}
    lam = min(scores, key=scores.get)
    print(f"{solver.__name__.upper()}-10 best NMSE {scores[lam]:.4f} at lam={lam}")

net = init_lista_from_model(MeasurementOperator.from_matrix(a), 0.1, 10, lf)
x_ista = np.stack([ista(a, y, IstaConfig(0.1, 10), lf)[0] for y in y_te])
print(f"untrained LISTA vs ISTA-10: max diff {np.max(np.abs(lista_forward(net, y_te) - x_ista)):.1e}")

res = train_net(net, [TrainSample(y, x) for y, x in zip(y_tr, x_tr)], 60,
                OptimizerConfig(learning_rate=1e-3),
                callback=lambda e, loss, n: print(f"epoch {e:2d} train loss {loss:.3e}") if e % 10 == 9 else None)
print(f"trained LISTA NMSE {nmse(lista_forward(res.net, y_te), x_te):.4f}")
