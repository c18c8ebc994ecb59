"""
Throughput
==========

Time preprocessing and inference separately on one scan, at the desk-scale
grid and at four times its area.
"""
from dentseg.metrics import bench
from dentseg.net import NetConfig, build
from dentseg.synth import SynthConfig, generate_dataset

net = build(NetConfig())
for cfg in (SynthConfig(), SynthConfig(width=320, height=192, world_x=1000.0, world_y=600.0)):
    grid = next(generate_dataset(cfg, 1, seed=0)).surface
    rep = bench(net, grid, repetitions=5)
    stages = ", ".join(f"{k} {1000 * v:.1f} ms" for k, v in rep.stages.items())
    print(f"{cfg.width}x{cfg.height}: {rep.points_per_second:,.0f} points/s ({stages})")
