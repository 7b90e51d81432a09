"""scenewalk: neural-symbolic question answering over synthetic scene graphs.

Pipeline stages: embed a symbolic scene into object/edge vectors, parse the
question into instruction vectors, traverse the graph one instruction per
step with a recurrent execution engine, and generate a templated full
answer. Everything is trainable end to end on a hand-rolled float64
autodiff substrate, with a symbolic oracle providing exact supervision.
"""

__version__ = "0.1.0"
