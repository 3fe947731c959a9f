import json
import os

import numpy as np
import pytest

from netlyap import exprcore as ex

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def config_path(name: str) -> str:
    return os.path.abspath(os.path.join(CONFIG_DIR, name))


def random_expr(rng: np.random.Generator, n_vars: int, depth: int = 3) -> ex.Expr:
    """Random expression tree; trig arguments are kept affine and bounded so
    interval evaluation stays inside its +-10*pi domain."""
    if depth == 0 or rng.uniform() < 0.25:
        if rng.uniform() < 0.6:
            return ex.var(int(rng.integers(n_vars)))
        return ex.const(float(rng.uniform(-2.0, 2.0)))
    kind = rng.choice(["add", "sub", "mul", "neg", "square", "tanh", "sin", "cos", "div"])
    if kind in ("sin", "cos"):
        arg = ex.const(float(rng.uniform(-1.5, 1.5))) * ex.var(int(rng.integers(n_vars))) \
            + ex.const(float(rng.uniform(-3.0, 3.0)))
        return ex.sin(arg) if kind == "sin" else ex.cos(arg)
    if kind == "div":
        num = random_expr(rng, n_vars, depth - 1)
        den = ex.const(float(rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])))
        return ex.Div(num, den)
    a = random_expr(rng, n_vars, depth - 1)
    if kind == "neg":
        return ex.Neg(a)
    if kind == "square":
        return ex.Square(a)
    if kind == "tanh":
        return ex.tanh(a)
    b = random_expr(rng, n_vars, depth - 1)
    return {"add": ex.Add, "sub": ex.Sub, "mul": ex.Mul}[kind](a, b)


def random_box(rng: np.random.Generator, n_vars: int, span: float = 2.0) -> np.ndarray:
    lo = rng.uniform(-span, span, size=n_vars)
    width = rng.uniform(0.0, span, size=n_vars)
    return np.stack([lo, lo + width], axis=-1)


def point_in_box(rng: np.random.Generator, box: np.ndarray) -> np.ndarray:
    return rng.uniform(box[:, 0], box[:, 1])


@pytest.fixture(scope="session")
def case1_cfg():
    with open(config_path("case1.json")) as fh:
        return json.load(fh)
