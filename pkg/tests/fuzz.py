"""Random well-formed upload reports for round-trip fuzzing."""

import numpy as np

from fedklpr.agg import ClientReport
from fedklpr.params import Layer, MaskLayer, ParamVector, PruneMask, pruning_ratio


def random_report(rng: np.random.Generator) -> ClientReport:
    layers, masks = [], []
    for i in range(int(rng.integers(1, 5))):
        if i == 0 or rng.random() < 0.6:
            shape = tuple(int(d) for d in rng.integers(1, 9, size=int(rng.integers(2, 4))))
            prunable = True
        else:
            shape = (int(rng.integers(1, 12)),)
            prunable = False
        n = int(np.prod(shape))
        bits = rng.random(n) < rng.random() if prunable else np.ones(n, bool)
        if rng.random() < 0.5:
            vals = rng.normal(size=n).astype(np.float32)
        else:
            # arbitrary bit patterns, NaN payloads and signed zeros included
            vals = rng.integers(0, 2**32, size=n, dtype=np.uint64).astype(np.uint32).view(np.float32).copy()
        vals[~bits] = 0.0
        name = f"layer{i}." + "".join(rng.choice(list("abcxyzé_"), size=int(rng.integers(0, 6))))
        layers.append(Layer(name, shape, vals, prunable))
        masks.append(MaskLayer(name, bits, prunable))
    mask = PruneMask(masks)
    return ClientReport(
        client_id=int(rng.integers(0, 2**16)),
        round=int(rng.integers(0, 2**16)),
        params=ParamVector(layers),
        mask=mask,
        pruning_ratio=float(np.float32(pruning_ratio(mask))),
        klaw_raw=float(np.float32(rng.exponential())),
    )


def reports_bit_equal(a: ClientReport, b: ClientReport) -> bool:
    if (a.client_id, a.round) != (b.client_id, b.round):
        return False
    if np.float32(a.pruning_ratio).tobytes() != np.float32(b.pruning_ratio).tobytes():
        return False
    if np.float32(a.klaw_raw).tobytes() != np.float32(b.klaw_raw).tobytes():
        return False
    if a.mask != b.mask or a.params.names != b.params.names:
        return False
    return all(
        tuple(x.shape) == tuple(y.shape) and x.values.astype(np.float32).tobytes() == y.values.tobytes()
        for x, y in zip(a.params.layers, b.params.layers)
    )
