# one-sample overfit: if train+sample are consistent, samples must reproduce the image
import numpy as np, torch, time
from pairflow import stages, synthdata, evalkit
from pairflow.pipeline import build_pipeline, run_inference
from pairflow.denoiser import DenoiserConfig

torch.set_num_threads(1)
rng = np.random.default_rng(3)
s = synthdata.sample_t2i(rng, "1obj", 32)
corpus = synthdata.Corpus(t2i=[s], edit=[], side=32, seed=3)
pipe = build_pipeline(DenoiserConfig(), 32, seed=0)
pipe.codec.fit_normalization(np.stack([synthdata.sample_t2i(rng, "1obj", 32).target for _ in range(64)]))
ec = stages.EncodedCorpus(corpus, pipe)
cfg = stages._stage("t2i", 32, "single", steps=800, batch_size=16, lr=2e-3, log_every=200, cfg_drop=0.0)
t0=time.time()
m = stages.run_stage(pipe, cfg, ec, run_seed=0)
print(f"overfit loss: {m['initial_loss']:.3f} -> {m['final_loss']:.4f} in {time.time()-t0:.0f}s")
imgs = run_inference(pipe, [s]*4, steps=32, cfg_scale=0.0, seed=1, mechanism="single")
err = np.abs(imgs - s.target[None]).mean()
print(f"mean abs err vs target: {err:.4f}")
dets = evalkit.detect_objects(imgs[0])
print("detections:", [(d.shape, d.color) for d in dets], "| truth:", [(o.shape,o.color) for o in s.scene.objects])
grid = np.concatenate([s.target] + list(imgs), axis=1)
synthdata.raster_to_png(grid, "tmp_exp/overfit_grid.png")
