"""Nash function t N_delta for the 1D heat kernel against its closed form.

Run with ``python demos/nash_plateau.py``; prints one row per ladder time.
"""
from kolmolab.drift_catalog import MatrixSpec, sample_matrix
from kolmolab.field_core import GridSpec
from kolmolab.kernel_solver import assemble, fundamental_solution, geometric_ladder
from kolmolab.nash_lab import nash_N, nash_N_identity

delta = 1.5
g = GridSpec(1, 8.0, 513)
a = sample_matrix(MatrixSpec.make("identity", 1), g)
tab = fundamental_solution(assemble(a, None), g.center, geometric_ladder(6 * g.h ** 2, 1.0, 8))
trace = nash_N(tab, a, delta)
ref = nash_N_identity(1, 1.0, delta)

print(f"closed form t N = {ref:.6f}")
for p in trace.points:
    print(f"t = {p['t']:.5f}   t N = {p['scaled']:.6f}   rel. error = {p['scaled'] / ref - 1:+.2e}")
