"""Shared builders for the training-based test fixtures."""

import numpy as np

from pdeascent import bsde, nets, sde


def solver_config(
    epochs=120,
    sample=2048,
    batch=256,
    lr=6e-3,
    x0_bounds=((-1.2, 1.2),),
    n_steps=20,
    horizon=1.0,
    optimizer="adam",
    **kwargs,
):
    train = nets.TrainConfig(
        learning_rate=lr, epochs=epochs, batch_size=batch, optimizer=optimizer
    )
    return bsde.SolverConfig(
        grid=sde.GridSpec(horizon=horizon, n_steps=n_steps),
        sample_size=sample,
        batch_size=batch,
        x0_bounds=np.asarray(x0_bounds, dtype=np.float64),
        value_train=train,
        field_train=train,
        **kwargs,
    )


def mse_between(field, oracle, ts, xs):
    err = field.value_batch(ts, xs) - oracle.value_batch(ts, xs)
    return float(np.mean(err**2))
