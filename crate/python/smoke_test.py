"""Smoke test for the adsrnet extension module.

Build and run from the repository root:

    cargo build -p adsrnet-python --features extension-module
    cp target/debug/libadsrnet.so python/adsrnet.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import adsrnet  # noqa: E402


def check_config():
    cfg = adsrnet.ModelConfig()
    assert (cfg.scale, cfg.variant, cfg.kernels, cfg.fusion) == (2, "full", 4, "multiply")
    assert cfg.param_count() == 1_820_327
    assert cfg.conv_layers() == 18
    assert len(adsrnet.ModelConfig.variants()) == 9
    try:
        adsrnet.ModelConfig(scale=5)
    except ValueError:
        pass
    else:
        raise AssertionError("scale 5 accepted")


def check_model(tmp):
    model = adsrnet.Model(adsrnet.ModelConfig(scale=3, variant="six_cru_cb"), seed=1)
    assert model.param_count() == model.config.param_count()
    shape, out = model.predict((1, 3, 4, 5), [0.5] * 60)
    assert shape == (1, 3, 12, 15) and len(out) == 3 * 12 * 15
    path = os.path.join(tmp, "m.ckpt")
    model.save(path)
    again = adsrnet.Model.load(path)
    assert again.config == model.config
    name = model.parameter_names()[0]
    assert again.parameter(name) == model.parameter(name)


def check_ops():
    shape, y = adsrnet.conv2d((1, 1, 3, 3), [1.0] * 9, (1, 1, 3, 3), [1.0] * 9, [0.0])
    assert shape == (1, 1, 3, 3)
    assert y == [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
    shape, y = adsrnet.pixel_shuffle((1, 4, 1, 1), [1.0, 2.0, 3.0, 4.0], 2)
    assert shape == (1, 1, 2, 2) and y == [1.0, 2.0, 3.0, 4.0]
    assert all(abs(p - 0.25) < 1e-8 for p in adsrnet.softmax([1.0, 2.0, 3.0, 4.0], 1e9))
    assert adsrnet.mae([1.0, 2.0], [0.0, 4.0]) == 1.5


def check_metrics():
    a = [float((i * 37) % 256) for i in range(16 * 16)]
    assert adsrnet.psnr(a, a, 16, 16) == math.inf
    b = [v + 1.0 for v in a]
    assert abs(adsrnet.psnr(a, b, 16, 16) - 48.1308) < 1e-3
    assert adsrnet.ssim(a, a, 16, 16) == 1.0


def check_gradients():
    rows = adsrnet.gradcheck(adsrnet.ModelConfig(variant="six_cru_cb"), samples=2)
    assert rows and all(err < 1e-4 for _, err in rows), rows


def main():
    with tempfile.TemporaryDirectory() as tmp:
        check_config()
        check_model(tmp)
        check_ops()
        check_metrics()
        check_gradients()
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
