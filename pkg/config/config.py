# config.py
import os

LOG_FILE = os.getenv("LEO_BEAM_LOG_FILE", "leo_beam_log.txt")
LOG_LEVEL = os.getenv("LEO_BEAM_LOG_LEVEL", "INFO")

# Worker processes for sweeps. 1 keeps every run single-threaded and bit-reproducible.
THREADS = int(os.getenv("LEO_BEAM_THREADS", "1"))

WORKDIR = os.getenv("LEO_BEAM_WORKDIR", "runs")
CODE_VERSION = os.getenv("LEO_BEAM_CODE_VERSION", "0.1")

#===============================================================================
# Link and system defaults
#===============================================================================
CARRIER_FREQ_HZ = 5e9
ALTITUDE_M = 1000e3
SAT_VELOCITY_MPS = 7.35e3
SAT_DOPPLER_HZ = 120e3
DEV_DOPPLER_MAX_HZ = 20.0
MIN_DELAY_S = 10e-3
BANDWIDTH_HZ = 25e6
SAT_GAIN_DBI = 17.0
DEVICE_GAIN_DBI = 3.0
NOISE_TEMP_K = 300.0
BOLTZMANN = 1.38e-23
RAIN_MEAN_DB = -2.6
RAIN_VAR_DB = 1.63
BEAMWIDTH_3DB_DEG = 0.4
RICIAN_FACTOR = 5.0
NOISE_POWER_DBM = -106.0
PILOT_POWER_DBW = 10.0
N_ANTENNAS = 16
N_DEVICES = 16
DEVICE_WEIGHT = 1.0
OUTAGE_PROB = 0.05
SINR_THRESHOLD_DB = 0.0
TOTAL_POWER_DBW = 10.0

# Chosen so the channel decorrelates slowly between slots.
N_PATHS = 8
SLOT_S = 1e-3
MAX_EXCESS_DELAY_S = 1e-6
THETA_MAX_FACTOR = 3.0
