import os

# Pin BLAS to one thread before numpy loads: keeps reductions bit-deterministic
# for the determinism and byte-identical-checkpoint tests.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
