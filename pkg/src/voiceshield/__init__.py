"""voiceshield: embedding-level adversarial protection against voice cloning, with a desk-scale evaluation harness.

Modules: ``signal`` (WAV, STFT, mel), ``diffnet`` (small autodiff nets),
``codec`` (linear mel codec), ``speaker`` (encoders and verification),
``defense`` (protection), ``attack`` (enhancement and toy voice conversion),
``corpus``, ``pipeline``, ``evaluation``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
