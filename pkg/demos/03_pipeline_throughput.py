"""
Serial versus parallel expert execution
=======================================

The three-stage pipeline routes a batch, runs each selected expert on its
sub-batch, then fuses. Scores do not depend on the schedule; only the makespan
does. On the virtual clock a wave costs the max of expert latencies when run in
parallel and their sum when run serially.
"""

from hetmoe import config as C
from hetmoe.datagen import generate
from hetmoe.pipeline import BenchSettings, qps_bench, score_all
from hetmoe.trainer import init_model

cfg = C.load_config(None, [], seed=1)
reg = C.registry(cfg)
reqs = [s.request for s in generate(C.dataset_spec(cfg))][:20000]
model = init_model(C.model_settings(cfg), reg.hidden_dims, seed=1)

# %% identical scores under both schedules
par = score_all(reqs[:2000], model, reg, "parallel")
ser = score_all(reqs[:2000], model, reg, "serial", shuffle_seed=3)
print("bit-identical:", par == ser)

# %% virtual-clock throughput
res = {m: qps_bench(reqs, model, reg, BenchSettings(mode=m, n_batches=200)) for m in ("parallel", "serial")}
for m, r in res.items():
    print(f"{m:8s} qps {r.qps:10.1f}")
print("ratio", res["parallel"].qps / res["serial"].qps)
