"""Central finite-difference checks on the float64 shadow path."""

import numpy as np

from stagedtrain.nn import Conv2d, Dense, Flatten, MaxPool2x2, Network, ReLU, backward, cross_entropy, forward


def loss_of(net, x, y):
    logits, _ = forward(net, x)
    return cross_entropy(logits, y)[0]


def max_rel_error(net, x, y, step=1e-5, max_entries=40, seed=0):
    """Worst relative error between backprop and central differences over sampled entries.

    The error is normalized by max(|analytic|, |numeric|, 1e-4) so exactly
    flat directions (dead ReLUs) do not divide by zero.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    logits, _ = forward(net, x, record=True)
    _, g = cross_entropy(logits, y)
    grads, gx = backward(net, g)
    worst = 0.0
    targets = [(p, dp) for layer, pair in zip(net.param_layers, grads) for p, dp in zip(layer.params, pair)]
    targets.append((x, gx))
    for p, dp in targets:
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + step
            hi = loss_of(net, x, y)
            flat[i] = old - step
            lo = loss_of(net, x, y)
            flat[i] = old
            num = (hi - lo) / (2 * step)
            ana = dp.reshape(-1)[i]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-4))
    return worst


def random_small_net(seed):
    """A random 2-3 parameterized-layer net mixing every layer kind, plus a batch."""
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    h = int(rng.choice([4, 5, 6]))
    k = int(rng.integers(2, 5))
    layers = []
    shape = (c, h, h)
    if rng.random() < 0.8:
        oc = int(rng.integers(1, 5))
        layers += [Conv2d(c, oc, int(rng.choice([1, 3])), rng), ReLU()]
        shape = (oc, h, h)
        if rng.random() < 0.6:
            layers.append(MaxPool2x2())
            shape = (oc, h // 2, h // 2)
    layers.append(Flatten())
    feat = int(np.prod(shape))
    if rng.random() < 0.7:
        hidden = int(rng.integers(2, 9))
        layers += [Dense(feat, hidden, rng), ReLU()]
        feat = hidden
    layers.append(Dense(feat, k, rng))
    net = Network(layers, (c, h, h)).astype(np.float64)
    # nonzero biases keep pre-activations off the ReLU kink when a whole layer is dead
    for layer in net.param_layers:
        layer.params[1][...] = rng.normal(0, 0.1, layer.params[1].shape)
    bsz = int(rng.integers(1, 6))
    # keep inputs away from exact ties in max-pooling
    x = rng.random((bsz, c, h, h))
    return net, x, rng.integers(0, k, bsz)
