"""End-to-end smoke test of the fatquant extension on the toy network.

    cd crates/python && pip install --no-build-isolation -e . && python python/smoke_test.py
"""

import fatquant as fq


def main():
    g = fq.toy_net(1)
    calib = fq.toy_input(2, 32)
    g = fq.fold_batch_norm(g)
    g, report = fq.dws_rescale(g, calib)
    assert '"patterns"' in report

    # 4-bit, so the thresholds have something to recover from rounding noise
    cfg = fq.calibrate(g, calib, bits=4, mode="asym", granularity="vector")
    assert "x" in cfg.sites()
    before = fq.distillation_rmse(g, cfg, calib)
    out = fq.finetune(g, cfg, calib, epochs=5, batch=8, lr=5e-3, train="both")
    after = fq.distillation_rmse(g, out.config, calib, scales=out.scales)
    assert len(out.epoch_losses) == 5
    assert after < before, (after, before)

    m = fq.compile(g, out.config, out.scales)
    m = fq.QuantizedModel.from_bytes(m.to_bytes())
    x = fq.toy_input(3, 8)
    z_int = m.run(x)
    z_float = g.forward(x)
    assert z_int.shape == z_float.shape == [8, 5]
    gap = z_int.max_abs_diff(z_float)
    print(f"rmse {before:.5f} -> {after:.5f}, int8 vs float max gap {gap:.4f}")

    again = fq.QuantConfig.from_json(out.config.to_json())
    assert again.to_json() == out.config.to_json()
    t = fq.Tensor([2, 2], [1.0, 2.0, 3.0, 4.0])
    assert fq.top1(t, [1, 1]) == 1.0
    print("ok")


if __name__ == "__main__":
    main()
