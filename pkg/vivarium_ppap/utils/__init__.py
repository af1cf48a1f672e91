# simple_config depends on the model module, so it is imported from
# vivarium_ppap.utils.simple_config directly rather than re-exported here.
from .atomic import atomic_path, atomic_write_bytes, atomic_write_text

__all__ = [
    'atomic_path',
    'atomic_write_bytes',
    'atomic_write_text',
]
