"""Module-wise latency, with and without the language cache.

Times the four pipeline components separately (text backbone, image
backbone, encoder/FPN, decoder/head) at batch size 1 with warm-up
excluded, then contrasts cache-on and cache-off runs: with the cache
pre-warmed, the text backbone drops out of the steady-state path.
"""

from efh.bench import COMPONENTS, emit_report, run_benchmark
from efh.data import DEFAULT_VOCAB, generate_synthetic_scene
from efh.model import Detector, ModelConfig

model = Detector(ModelConfig(seed=0))
image = generate_synthetic_scene(0)[0]
prompt = "Detect objects in " + ", ".join(DEFAULT_VOCAB)

results = {}
for cache_enabled in (False, True):
    results[cache_enabled] = run_benchmark(
        model, [image], prompt, DEFAULT_VOCAB,
        iterations=40, warmup=5, cache_enabled=cache_enabled)

print(f"{'component':>16} {'cache off (ms)':>15} {'cache on (ms)':>15}")
for name in COMPONENTS + ("total",):
    off = (results[False].components.get(name) or results[False].total)["mean_ms"]
    on = (results[True].components.get(name) or results[True].total)["mean_ms"]
    print(f"{name:>16} {off:>15.3f} {on:>15.3f}")
print(f"{'fps':>16} {results[False].fps:>15.1f} {results[True].fps:>15.1f}")

print("\nCSV report (cache on):")
print(emit_report(results[True], fmt="csv"))
