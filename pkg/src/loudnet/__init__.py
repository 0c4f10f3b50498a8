"""loudnet: distills an excitation-pattern loudness model into a fast MLP.

Pipeline: 61-band spectral frontend -> phon-labeled dataset synthesis ->
from-scratch MLP regression -> evaluation and real-time streaming.
"""

from .errors import (CalibrationError, ConfigError, DivergenceError,
                     FormatError, LoudnetError)
from .frontend import (AudioFrame, BinningPlan, CalibrationSpec, SpectrumFrame,
                       build_binning_plan, calibrate_rms, default_plan,
                       frame_audio, read_spectra, read_wav, reduce_spectrum,
                       write_spectra)
from .mlp import (AdamState, MlpModel, TrainConfig, adam_step, backward,
                  forward, init_model, load_model, loss_mse, save_model, train)
from .oracle import EarTransfer, ExcitationPattern, LoudnessLabel, LoudnessOracle
from .synth import (Dataset, NoiseSpec, ToneSpec, gen_noise_records,
                    gen_tone_records, import_labels, ingest_wav, read_dataset,
                    write_dataset)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AudioFrame", "BinningPlan", "CalibrationError",
    "CalibrationSpec", "ConfigError", "Dataset", "DivergenceError",
    "EarTransfer", "ExcitationPattern", "FormatError", "LoudnessLabel",
    "LoudnessOracle", "LoudnetError", "MlpModel", "NoiseSpec", "SpectrumFrame",
    "ToneSpec", "TrainConfig", "adam_step", "backward", "build_binning_plan",
    "calibrate_rms", "default_plan", "forward", "frame_audio",
    "gen_noise_records", "gen_tone_records", "import_labels", "ingest_wav",
    "init_model", "load_model", "loss_mse", "read_dataset", "read_spectra",
    "read_wav", "reduce_spectrum", "save_model", "train", "write_dataset",
    "write_spectra",
]
