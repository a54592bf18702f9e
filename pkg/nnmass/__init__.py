"""Topology metrics (NN-Density, NN-Mass), gradient-flow experiments and training-free design of deep networks."""
from . import analysis, datasets, design, errors, network, randmat, topology
from .analysis import SweepGrid, linear_fit, param_count, flop_count, run_sweep
from .datasets import Dataset, gen_circle, gen_seg, load_idx
from .design import DesignQuery, compress, design_for_mass, mass_range
from .network import InitScheme, TrainConfig, build_model, ldi_report, train
from .topology import ArchitectureSpec, CellSpec, avg_degree, mass_report, nn_density, nn_mass, realize_topology
