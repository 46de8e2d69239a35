"""Scratch calibration for the overfit acceptance run (not part of the package)."""
import sys
import time

from langloc import data, model, training

lr0 = float(sys.argv[1])
drop = float(sys.argv[2])
epochs = int(sys.argv[3])
seed = int(sys.argv[4]) if len(sys.argv) > 4 else 7

catalog = data.synthetic_catalog(3)
vocab = data.build_vocab(catalog)
cfg = model.ModelConfig(channels=3, height=64, width=64, patch=8, d_model=64,
                        n_heads=4, n_layers=4, n_scenes=3, vocab_size=len(vocab),
                        max_caption_len=16, dropout=drop)
ds_cfg = data.DatasetConfig(channels=3, height=64, width=64, max_caption_len=16)
samples = data.generate_synthetic(20240601, catalog, 32, ds_cfg)
beta2 = float(sys.argv[5]) if len(sys.argv) > 5 else 0.999
tc = training.TrainConfig(lr0=lr0, weight_decay=4e-5, batch_size=16, epochs=epochs,
                          dropout=drop, seed=seed, eval_every=100000,
                          jitter_brightness=0.0, jitter_contrast=0.0,
                          jitter_saturation=0.0, jitter_hue=0.0, crop_size=64,
                          adam_beta2=beta2)
t0 = time.time()
result = training.train(cfg, tc, samples, catalog, out_dir=None)
dt = time.time() - t0
report = training.evaluate(result.params, cfg, samples, catalog)
rs = result.records
print(f"lr0={lr0} dropout={drop} steps={len(rs)} time={dt:.0f}s "
      f"({dt/len(rs)*1000:.0f} ms/step)")
for r in rs[:: max(1, len(rs)//12)]:
    print(f"  step {r.step:5d} loss {r.loss:10.4f} l_cls {r.l_cls:8.5f} "
          f"a {r.alpha:8.4f} b {r.beta:8.4f}")
print(f"  final: loss {rs[-1].loss:.4f} alpha {result.params.alpha.item():.4f} "
      f"beta {result.params.beta.item():.4f}")
print(f"  eval: acc {report.accuracy:.3f} pos {report.average_position_m:.5f} "
      f"rot {report.average_rotation_deg:.4f}")
for s in report.scenes:
    print(f"    {s.name}: pos {s.median_position_m:.5f} rot {s.median_rotation_deg:.4f} "
          f"acc {s.accuracy:.3f}")
