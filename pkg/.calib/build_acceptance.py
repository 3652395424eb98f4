import sys, time
sys.path.insert(0, "tests")
from acceptance_config import build_main, build_ecc_pair

t0 = time.time()
print("building main experiment...", flush=True)
cfg = build_main()
print(f"[{(time.time()-t0)/60:.1f} min] main done -> {cfg.output_root}", flush=True)
print("building ecc pair...", flush=True)
build_ecc_pair()
print(f"[{(time.time()-t0)/60:.1f} min] all acceptance artifacts built", flush=True)
