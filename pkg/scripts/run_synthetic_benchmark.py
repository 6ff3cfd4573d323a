"""Toy-scale FAN pretraining + scratch / fine-tune / adaptation comparison.

    python3 scripts/run_synthetic_benchmark.py --out runs/benchmark
    python3 scripts/run_synthetic_benchmark.py --n-train 600 --n-test 200 --au-epochs 4   # quick look

Every BenchmarkConfig field is a flag; see --help.
"""
from auheat.experiment import main

if __name__ == "__main__":
    main()
