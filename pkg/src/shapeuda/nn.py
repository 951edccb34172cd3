"""Parameter-creating layer helpers shared by the segmenter, VAE and discriminator.

Each ``add_*`` function registers parameters under a name prefix; the matching
apply function reads them back from the store by the same prefix.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .params import ParamStore, uniform_init


# Without normalisation the default init shrinks activations layer by layer;
# GAIN_LINEAR / GAIN_RELU scale the uniform bound to preserve variance instead.
GAIN_LINEAR = np.sqrt(3.0)
GAIN_RELU = np.sqrt(6.0)


def add_conv(store: ParamStore, name: str, cin: int, cout: int, k: int, rng, gain: float = 1.0):
    fan_in = cin * k ** 3
    store.add(f"{name}.weight", gain * uniform_init(rng, (cout, cin, k, k, k), fan_in))
    store.add(f"{name}.bias", uniform_init(rng, (cout,), fan_in))


def add_conv_t(store: ParamStore, name: str, cin: int, cout: int, k: int, stride: int, rng,
               gain: float = 1.0):
    # each output voxel sees cin * (k/stride)^3 inputs
    fan_in = max(1, cin * k ** 3 // stride ** 3)
    store.add(f"{name}.weight", gain * uniform_init(rng, (cin, cout, k, k, k), fan_in))
    store.add(f"{name}.bias", uniform_init(rng, (cout,), fan_in))


def add_bn(store: ParamStore, name: str, c: int):
    store.add(f"{name}.scale", np.ones(c))
    store.add(f"{name}.shift", np.zeros(c))
    store.add(f"{name}.running_mean", np.zeros(c), trainable=False)
    store.add(f"{name}.running_var", np.ones(c), trainable=False)


def add_linear(store: ParamStore, name: str, nin: int, nout: int, rng):
    store.add(f"{name}.weight", uniform_init(rng, (nout, nin), nin))
    store.add(f"{name}.bias", uniform_init(rng, (nout,), nin))


def conv(store, name, x, stride=1, padding=None):
    w = store[f"{name}.weight"]
    k = w.shape[2]
    return ad.conv3d(x, w, store[f"{name}.bias"], stride=stride, padding=k // 2 if padding is None else padding)


def conv_t(store, name, x, stride=2):
    return ad.conv_transpose3d(x, store[f"{name}.weight"], store[f"{name}.bias"], stride=stride)


def bn_relu(store, name, x, training, update_stats=True):
    """Batch norm then ReLU; plain ReLU when the block was built without normalisation."""
    if f"{name}.scale" not in store:
        return ad.relu(x)
    y = ad.batch_norm(x, store[f"{name}.scale"], store[f"{name}.shift"],
                      store[f"{name}.running_mean"], store[f"{name}.running_var"], training,
                      update_stats=update_stats)
    return ad.relu(y)


def linear(store, name, x):
    return ad.linear(x, store[f"{name}.weight"], store[f"{name}.bias"])


# Down block: strided conv cin->cin, conv cin->cout, then two conv cout->cout;
# batch norm + ReLU follow the last three convolutions.

def add_down_block(store, name, cin, cout, rng, norm=True):
    g0, g = (1.0, 1.0) if norm else (GAIN_LINEAR, GAIN_RELU)
    add_conv(store, f"{name}.conv0", cin, cin, 3, rng, g0)
    add_conv(store, f"{name}.conv1", cin, cout, 3, rng, g)
    for i in (2, 3):
        add_conv(store, f"{name}.conv{i}", cout, cout, 3, rng, g)
    if norm:
        for i in (1, 2, 3):
            add_bn(store, f"{name}.bn{i}", cout)


def down_block(store, name, x, training, update_stats=True):
    x = conv(store, f"{name}.conv0", x, stride=2)
    for i in (1, 2, 3):
        x = bn_relu(store, f"{name}.bn{i}", conv(store, f"{name}.conv{i}", x), training, update_stats)
    return x


# Up block: the first conv is replaced by a 2x transposed conv; an optional
# skip tensor is concatenated before the cin->cout conv.

def add_up_block(store, name, cin, cout, rng, skip=0, norm=True):
    g0, g = (1.0, 1.0) if norm else (GAIN_LINEAR, GAIN_RELU)
    add_conv_t(store, f"{name}.convt", cin, cin, 2, 2, rng, g0)
    add_conv(store, f"{name}.conv1", cin + skip, cout, 3, rng, g)
    for i in (2, 3):
        add_conv(store, f"{name}.conv{i}", cout, cout, 3, rng, g)
    if norm:
        for i in (1, 2, 3):
            add_bn(store, f"{name}.bn{i}", cout)


def up_block(store, name, x, training, skip=None, update_stats=True):
    x = conv_t(store, f"{name}.convt", x)
    if skip is not None:
        x = ad.concat([x, skip], axis=0)
    for i in (1, 2, 3):
        x = bn_relu(store, f"{name}.bn{i}", conv(store, f"{name}.conv{i}", x), training, update_stats)
    return x
