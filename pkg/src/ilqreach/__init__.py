"""Iterative LQ solver for reachability games with extremum-over-time costs."""
