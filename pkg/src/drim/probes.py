"""Post-hoc diagnostics of learned representations against known generative factors."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor, backward
from .encoders import Discriminator, discriminate
from .losses import discriminator_loss
from .training import AdamW


def representations(model, data) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Eval-mode shared and unique representations per modality (absent rows are zero)."""
    model.eval()
    shared, unique = model.encode(data.features, data.present)
    return [s.data for s in shared], [u.data for u in unique]


def probe_discriminator_accuracy(
    s_train: np.ndarray,
    u_train: np.ndarray,
    s_test: np.ndarray,
    u_test: np.ndarray,
    seed: int = 0,
    epochs: int = 200,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> float:
    """Held-out accuracy of a fresh discriminator separating joint from shuffled pairs.

    0.5 means the pairs are indistinguishable, i.e. no detectable dependence
    between the shared and unique parts.  Test pairs are balanced: every
    joint pair plus one shuffled copy.
    """
    rng = np.random.default_rng(seed)
    d = s_train.shape[1]
    D = Discriminator(d, rng)
    opt = AdamW(D.parameters(), weight_decay=0.0)
    n = len(s_train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n - 1, batch_size):
            idx = order[i:i + batch_size]
            if idx.size < 2:
                continue
            loss = discriminator_loss([Tensor(s_train[idx])], [Tensor(u_train[idx])], [D],
                                      np.ones((1, idx.size), bool), rng)
            opt.zero_grad()
            backward(loss)
            opt.step(lr)
    D.eval()
    perm = rng.permutation(len(s_test))
    joint = discriminate(D, Tensor(s_test), Tensor(u_test)).data
    marginal = discriminate(D, Tensor(s_test[perm]), Tensor(u_test)).data
    correct = (joint < 0.5).sum() + (marginal >= 0.5).sum()
    return float(correct / (2 * len(s_test)))


def linear_probe_r2(x_train, y_train, x_test, y_test, ridge: float = 1e-6) -> float:
    """Test R^2 of a least-squares linear map (with intercept), pooled over target columns."""
    x_train, x_test = np.asarray(x_train, float), np.asarray(x_test, float)
    y_train, y_test = np.asarray(y_train, float), np.asarray(y_test, float)
    Xa = np.hstack([x_train, np.ones((len(x_train), 1))])
    coef = np.linalg.solve(Xa.T @ Xa + ridge * np.eye(Xa.shape[1]), Xa.T @ y_train)
    pred = np.hstack([x_test, np.ones((len(x_test), 1))]) @ coef
    ss_res = ((y_test - pred) ** 2).sum()
    ss_tot = ((y_test - y_test.mean(axis=0)) ** 2).sum()
    return float(1.0 - ss_res / ss_tot)


def disentanglement_report(model, train, test, seed: int = 0, probe_epochs: int = 200) -> list[dict]:
    """Per-modality probe accuracy and shared-factor R^2 from ``s`` versus ``u``."""
    s_tr, u_tr = representations(model, train)
    s_te, u_te = representations(model, test)
    rows = []
    for m in range(train.n_modalities):
        a, b = train.present[m], test.present[m]
        rows.append({
            "modality": m,
            "probe_accuracy": probe_discriminator_accuracy(s_tr[m][a], u_tr[m][a], s_te[m][b], u_te[m][b],
                                                           seed=seed + m, epochs=probe_epochs),
            "r2_shared_from_s": linear_probe_r2(s_tr[m][a], train.true_shared[a], s_te[m][b], test.true_shared[b]),
            "r2_shared_from_u": linear_probe_r2(u_tr[m][a], train.true_shared[a], u_te[m][b], test.true_shared[b]),
        })
    return rows
