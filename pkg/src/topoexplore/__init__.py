"""Multi-agent exploration with a shared dynamic topological graph.

Library layout: `world` (mapping + sensing), `dtg` (topological graph
maintenance), `partition` (graph Voronoi task allocation), `planner`
(hierarchical target selection and motion), `comms` (incremental sync
protocol with byte accounting), `sim` (deterministic lockstep runner),
`report` (figure rendering from exported CSVs).
"""

__version__ = "0.1.0"
