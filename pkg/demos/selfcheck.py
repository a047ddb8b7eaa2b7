"""Run the built-in verification suites and print every check.

Same thing `mixnet verify` does from the command line: finite-difference
gradient checks for every op and a real network, reference-architecture
conformance for all three variants, the v3-inside-v1 embedding identity,
metric agreement against plain-loop references, optimizer arithmetic,
and the augmentation policy invariants.
"""

from mixnet import verify

results = verify.run_all(trials=40)
print(verify.format_results(results))
verify.require_all(results)
