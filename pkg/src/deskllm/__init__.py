"""deskllm: a desk-scale local LLM stack.

Quantized decoder-transformer inference on CPU, LoRA adaptation over frozen
base weights, dataset curation, an evaluation harness, a streaming HTTP
server, and a single CLI binding it all together.
"""

__version__ = "0.1.0"
