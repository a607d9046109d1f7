import time, numpy as np, torch, json
from pairflow import stages, synthdata, evalkit
from pairflow.pipeline import build_pipeline, run_inference
from pairflow.denoiser import DenoiserConfig

torch.set_num_threads(1)
t0 = time.time()
corpus = synthdata.build_corpus(seed=1, n_t2i=8192, n_edit=0, side=32)
pipe = build_pipeline(DenoiserConfig(), resolution=32, seed=0)
pipe.codec.fit_normalization(np.stack([s.target for s in corpus.t2i[:512]]))
ec = stages.EncodedCorpus(corpus, pipe)
print(f"setup {time.time()-t0:.0f}s", flush=True)

suite = evalkit.build_generation_suite(5, 100, 32)
total = 0
for seg in range(8):
    cfg = stages._stage("t2i", 32, "single", steps=1000, batch_size=64, lr=1e-3, log_every=250)
    t0 = time.time()
    m = stages.run_stage(pipe, cfg, ec, run_seed=100+seg, stage_index=seg)
    total += 1000
    line = {"steps": total, "train_s": round(time.time()-t0), "loss": m["final_loss"]}
    for cfgs in (2.0, 3.0):
        imgs = run_inference(pipe, suite, steps=24, cfg_scale=cfgs, seed=0, mechanism="single")
        res = [evalkit.check_generation(im, s) for im, s in zip(imgs, suite)]
        agg = evalkit.aggregate_generation(res)
        line[f"overall@cfg{cfgs}"] = round(agg["overall"], 3)
        line[f"cats@cfg{cfgs}"] = {k: (None if v is None else round(v,2)) for k,v in agg["per_category"].items()}
    print(json.dumps(line), flush=True)
