"""Independent reference implementations used to pin production numerics.

Each oracle takes the slow, textbook route on purpose; none of them share
code with the package under test.
"""

import itertools
import math

import numpy as np

from roadfirst.dataset import Column, Frame, Schema


def normal_equations_r2(y, X):
    """R^2 of ``y`` on ``[1, X]`` solved through the normal equations."""
    A = np.column_stack([np.ones(len(y)), X])
    beta = np.linalg.solve(A.T @ A, A.T @ y)
    resid = y - A @ beta
    sst = np.sum((y - y.mean()) ** 2)
    return 1.0 - resid @ resid / sst


def oracle_vif(X, j):
    others = np.delete(X, j, axis=1)
    r2 = normal_equations_r2(X[:, j], others)
    return 1.0 / (1.0 - r2)


def two_pass_pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def brute_shapley(f, x, Z):
    """Interventional Shapley values by looping over every subset of features.

    ``f`` maps an ``(m, p)`` array to ``m`` outputs.
    """
    x = np.asarray(x, dtype=float)
    Z = np.asarray(Z, dtype=float)
    p = x.size

    def v(S):
        H = Z.copy()
        for i in S:
            H[:, i] = x[i]
        return float(np.mean(f(H)))

    phi = np.zeros(p)
    for i in range(p):
        rest = [j for j in range(p) if j != i]
        for size in range(p):
            w = math.factorial(size) * math.factorial(p - size - 1) / math.factorial(p)
            for S in itertools.combinations(rest, size):
                phi[i] += w * (v(S + (i,)) - v(S))
    return phi, v(())


def walk_tree(tree_doc, x):
    """Leaf class-1 probability reached by ``x`` in a serialized tree."""
    node = 0
    feature, threshold = tree_doc["feature"], tree_doc["threshold"]
    while feature[node] != -1:
        node = tree_doc["left"][node] if x[feature[node]] < threshold[node] else tree_doc["right"][node]
    c0, c1 = tree_doc["counts"][node]
    return c1 / (c0 + c1)


def continuous_frame(X, names=None, target=None, feature_class="dynamic"):
    """Frame of continuous feature columns, optionally with a binary target."""
    X = np.asarray(X, dtype=float)
    names = names or [f"x{j}" for j in range(X.shape[1])]
    cols = [Column(n, "continuous", feature_class) for n in names]
    data = {n: X[:, j] for j, n in enumerate(names)}
    if target is not None:
        cols.append(Column("y", "target"))
        data["y"] = np.asarray(target, dtype=float)
    return Frame(Schema(cols), data)


def mixed_frame(rng, n=1200, positive_rate=0.15):
    """Dummy-encoded frame with continuous, categorical, binary and identifier columns."""
    from roadfirst.dataset import encode_dummies

    y = (rng.random(n) < positive_rate).astype(float)
    y[:3] = 1.0
    y[3:6] = 0.0
    surface = rng.choice(["asphalt", "concrete", "gravel"], size=n, p=[0.5, 0.3, 0.2])
    schema = Schema([
        Column("crash_id", "identifier"),
        Column("speed", "continuous", "static_road"),
        Column("hour", "continuous"),
        Column("surface", "categorical", "static_road"),
        Column("rural", "binary", "static_road"),
        Column("y", "target"),
    ])
    frame = Frame(schema, {
        "crash_id": [f"c{i}" for i in range(n)],
        "speed": rng.choice([25.0, 35.0, 45.0, 55.0, 65.0], size=n) + 10 * y,
        "hour": rng.uniform(0, 24, size=n),
        "surface": list(surface),
        "rural": (rng.random(n) < 0.3 + 0.3 * y).astype(float),
        "y": y,
    })
    return encode_dummies(frame)
