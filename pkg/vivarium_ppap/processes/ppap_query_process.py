import logging
from pathlib import Path

from vivarium.core.process import Process

from vivarium_ppap.dsp import log_mel_spectrogram, read_wav
from vivarium_ppap.inference import QueryPlan, SILENT_ID, load_bank, query_optimized, rank
from vivarium_ppap.model import load_weights

logger = logging.getLogger(__name__)


class PPAPQueryProcess(Process):
    """
    Vivarium wrapper around the optimized masker-gain query.

    Loads a trained model and its masker cache once, then ranks masker-gain
    pairs for whatever soundscape arrives on the ``inputs`` port.
    """

    defaults = {
        'weights_path': None,
        'cache_path': None,
        'include_silent': False,
    }

    def __init__(self, parameters=None):
        super().__init__(parameters)

        if not self.parameters.get('weights_path') or not self.parameters.get('cache_path'):
            raise ValueError(
                "weights_path and cache_path are required. Create them with:\n"
                "ppap train ... && ppap precompute --weights weights.ppapw ..."
            )
        self.model, self.weights_metadata = load_weights(self.parameters['weights_path'])
        self.bank = load_bank(self.parameters['cache_path'], self.model)

    def ports_schema(self):
        return {
            'inputs': {
                'soundscape_wav': {
                    '_default': '',
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Soundscape',
                    '_description': 'WAV recording of the unaugmented soundscape',
                    '_category': 'Query',
                },
                'masker_ids': {
                    '_default': [],
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Candidate Maskers',
                    '_description': 'Masker ids to query; empty means every masker in the cache',
                    '_category': 'Query',
                },
                'gamma_range': {
                    '_default': (-2.0, 2.0),
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Log-gain Range',
                    '_description': 'Lowest and highest log10 digital gain to query',
                    '_category': 'Query',
                },
                'gamma_count': {
                    '_default': 9,
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Gains per Masker',
                    '_description': 'Evenly spaced gains per masker, endpoints included',
                    '_category': 'Query',
                },
                'top_k': {
                    '_default': 5,
                    '_updater': 'set',
                    '_emit': True,
                    '_display_name': 'Top K',
                    '_description': 'Number of ranked masker-gain pairs to report',
                    '_category': 'Query',
                },
            },
            'outputs': {
                'ranked_pairs': {
                    '_default': [],
                    '_updater': 'set',
                    '_emit': True,
                },
                'call_counts': {
                    '_default': {},
                    '_updater': 'set',
                    '_emit': True,
                },
                'stage_times': {
                    '_default': {},
                    '_updater': 'set',
                    '_emit': True,
                },
                'query_success': {
                    '_default': False,
                    '_updater': 'set',
                    '_emit': True,
                },
            },
        }

    def next_update(self, timestep, states):
        query = states['inputs']
        soundscape_path = Path(query['soundscape_wav'])
        masker_ids = list(query['masker_ids']) or self.bank.masker_ids
        if self.parameters.get('include_silent') and SILENT_ID not in masker_ids:
            masker_ids.append(SILENT_ID)
        lo, hi = query['gamma_range']

        logger.info(f"PPAPQueryProcess: Ranking {len(masker_ids)} masker(s) x {query['gamma_count']} gain(s) "
                    f"for {soundscape_path.name}")
        spectrogram = log_mel_spectrogram(read_wav(soundscape_path), **self.model.config.spectrogram_kwargs())
        plan = QueryPlan.from_range(masker_ids, lo, hi, int(query['gamma_count']))
        result = query_optimized(self.model, spectrogram, plan, bank=self.bank)

        return {
            'outputs': {
                'ranked_pairs': [pair.to_dict() for pair in rank(result, int(query['top_k']))],
                'call_counts': dict(zip(('f_s', 'f_m', 'gao'), result.call_counts)),
                'stage_times': dict(result.times),
                'query_success': True,
            }
        }
