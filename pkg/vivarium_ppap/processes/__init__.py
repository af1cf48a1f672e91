from .ppap_training_process import PPAPTrainingProcess
from .ppap_query_process import PPAPQueryProcess
