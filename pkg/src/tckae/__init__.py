"""Time series cluster kernel and kernel-aligned autoencoders for MTS with missing data."""

from .autoencoder import Autoencoder, TrainConfig, encode, init_network, train
from .errors import DataFormatError, NumericalError, TckaeError, TckFitError
from .mts import TimeSeriesDataset, load_dataset, save_dataset
from .tck import TckConfig, TckModel, fit_tck, kernel_matrix

__version__ = "0.1.0"
