"""Detection and repair of oversegmented cells in 3D label volumes."""

from .volume import LabelVolume, Mask2D, build_adjacency, build_cell_index, load_volume, write_volume

__all__ = ["LabelVolume", "Mask2D", "build_adjacency", "build_cell_index", "load_volume", "write_volume"]
__version__ = "0.1.0"
