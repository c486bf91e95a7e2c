"""BN-Inception builder and the M1-M8 model ladder.

Only M1 and M3 are built by hand; every other rung is derived from them by
the compression passes, so the ladder cannot drift from the passes.
"""

from __future__ import annotations

import functools
from importlib import resources

from .compression import fold_batchnorm, scale_channels, separable_factorize, set_input_resolution
from .graph import LayerSpec, ModelSpec, load_spec, save_spec

MODEL_IDS = ("M1", "M2", "M3", "M4", "M5", "M6", "M7", "M8")
INPUT_FRAMES = 10
ENTRY_CONV = "conv1_7x7_s2"
CHANNEL_FACTOR = 0.75

# name: (1x1, 3x3 reduce, 3x3, double reduce, double 3x3, pool, pool proj, downsample)
INCEPTION_BLOCKS = (
    ("3a", 64, 64, 64, 64, 96, "avg", 32, False),
    ("3b", 64, 64, 96, 64, 96, "avg", 64, False),
    ("3c", 0, 128, 160, 64, 96, "max", 0, True),
    ("4a", 224, 64, 96, 96, 128, "avg", 128, False),
    ("4b", 192, 96, 128, 96, 128, "avg", 128, False),
    ("4c", 160, 128, 160, 128, 160, "avg", 128, False),
    ("4d", 96, 128, 192, 160, 192, "avg", 128, False),
    ("4e", 0, 128, 192, 192, 256, "max", 0, True),
    ("5a", 352, 192, 320, 160, 224, "avg", 128, False),
    ("5b", 352, 192, 320, 192, 224, "max", 128, False),
)


class _Builder:
    def __init__(self):
        self.layers = [LayerSpec("data", "input")]

    def add(self, lid, kind, inputs, **attrs):
        self.layers.append(LayerSpec(lid, kind, tuple(inputs), attrs))
        return lid

    def conv_bn_relu(self, lid, src, cout, k=1, s=1, p=0):
        self.add(lid, "conv", [src], out_channels=cout, kernel=(k, k), stride=(s, s), padding=(p, p))
        self.add(f"{lid}_bn", "batchnorm", [lid], eps=1e-5)
        return self.add(f"{lid}_relu", "relu", [f"{lid}_bn"])

    def max_pool(self, lid, src, k=3, s=2, p=0, ceil=True):
        return self.add(lid, "pool_max", [src], kernel=(k, k), stride=(s, s), padding=(p, p), ceil_mode=ceil)

    def inception(self, name, src, b1, r3, c3, rd, d3, pool, proj, down):
        pre = f"inception_{name}"
        s = 2 if down else 1
        branches = []
        if b1:
            branches.append(self.conv_bn_relu(f"{pre}_1x1", src, b1))
        t = self.conv_bn_relu(f"{pre}_3x3_reduce", src, r3)
        branches.append(self.conv_bn_relu(f"{pre}_3x3", t, c3, 3, s, 1))
        t = self.conv_bn_relu(f"{pre}_double_3x3_reduce", src, rd)
        t = self.conv_bn_relu(f"{pre}_double_3x3_1", t, d3, 3, 1, 1)
        branches.append(self.conv_bn_relu(f"{pre}_double_3x3_2", t, d3, 3, s, 1))
        if pool == "avg":
            t = self.add(f"{pre}_pool", "pool_avg", [src], kernel=(3, 3), stride=(1, 1), padding=(1, 1),
                         ceil_mode=False)
        elif down:
            t = self.max_pool(f"{pre}_pool", src, 3, 2, 0, ceil=True)
        else:
            t = self.max_pool(f"{pre}_pool", src, 3, 1, 1, ceil=False)
        branches.append(self.conv_bn_relu(f"{pre}_pool_proj", t, proj) if proj else t)
        return self.add(f"{pre}_output", "concat", branches)


def bn_inception(input_side=224, last_block="5b", in_channels=INPUT_FRAMES, classes=2, name=None):
    """BN-Inception (Inception-v2) truncated after ``last_block``.

    Stem: 7x7/2 conv (64), 3x3/2 max pool, 1x1 conv (64), 3x3 conv (192),
    3x3/2 max pool; then inception blocks; then global average pooling and a
    fully connected head.  Stride-2 max pools use ceil mode.
    """
    names = [b[0] for b in INCEPTION_BLOCKS]
    if last_block not in names:
        raise ValueError(f"unknown inception block {last_block!r}")
    b = _Builder()
    t = b.conv_bn_relu(ENTRY_CONV, "data", 64, 7, 2, 3)
    t = b.max_pool("pool1_3x3_s2", t)
    t = b.conv_bn_relu("conv2_3x3_reduce", t, 64)
    t = b.conv_bn_relu("conv2_3x3", t, 192, 3, 1, 1)
    t = b.max_pool("pool2_3x3_s2", t)
    for block in INCEPTION_BLOCKS[: names.index(last_block) + 1]:
        t = b.inception(block[0], t, *block[1:])
    t = b.add("global_pool", "global_avg_pool", [t])
    b.add("fc", "fully_connected", [t], out_features=classes)
    record = {"pass": "bn_inception", "input_side": input_side, "last_block": last_block}
    return ModelSpec(name or f"bn_inception_{last_block}_{input_side}", (in_channels, input_side, input_side),
                     b.layers, class_count=classes, provenance=(record,))


@functools.lru_cache(maxsize=None)
def canonical_model(model_id):
    """Generate rung ``M1``..``M8`` of the ladder."""
    model_id = model_id.upper()
    if model_id == "M1":
        spec = bn_inception(224, "5b")
    elif model_id == "M2":
        spec = set_input_resolution(canonical_model("M1"), 64)
    elif model_id == "M3":
        spec = bn_inception(64, "3c")
    elif model_id == "M4":
        spec = separable_factorize(canonical_model("M3"), layers=[ENTRY_CONV])
    elif model_id == "M5":
        spec = scale_channels(canonical_model("M4"), CHANNEL_FACTOR)
    elif model_id == "M6":
        spec = set_input_resolution(canonical_model("M3"), 32)
    elif model_id == "M7":
        spec = scale_channels(separable_factorize(canonical_model("M6"), layers=[ENTRY_CONV]), CHANNEL_FACTOR)
    elif model_id == "M8":
        spec, _ = fold_batchnorm(canonical_model("M7"))
    else:
        raise KeyError(f"unknown model id {model_id!r}; expected one of {MODEL_IDS}")
    return spec.derive(name=model_id)


def packaged_spec_path(model_id):
    return resources.files("dvstn") / "models" / f"{model_id.upper()}.json"


def load_canonical(model_id):
    """Read the checked-in spec file for a rung."""
    with resources.as_file(packaged_spec_path(model_id)) as path:
        return load_spec(path)


def export_canonical(directory):
    """Write every rung as ``<dir>/M?.json``; returns the written paths."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for mid in MODEL_IDS:
        path = directory / f"{mid}.json"
        save_spec(canonical_model(mid), path)
        paths.append(path)
    return paths


if __name__ == "__main__":
    import sys

    for p in export_canonical(sys.argv[1] if len(sys.argv) > 1 else "."):
        print(p)
