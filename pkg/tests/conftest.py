import os

# Pin BLAS to one thread before numpy loads: keeps small-matrix ops fast
# and reductions bit-reproducible across runs.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
