"""Lookup-table composition experiments with recurrent sequence learners.

Subpackages: `tables` (tasks and splits), `prompts` (episode codec),
`automaton` (the FSA oracle), `net` (from-scratch LSTM + BPTT), `trainer`
(two-phase regimens and variants), `evaluation` (scoring and baselines),
`search` (parallel run harness), `cli` (command-line entry point).
"""

__version__ = "0.1.0"
