"""Contrastive-captioner alignment of slide embeddings with text."""
from gridslide.align.beam import Hypothesis, beam_search, greedy_decode, sequence_logprob
from gridslide.align.model import (
    MAX_LEN,
    N_CONTRAST,
    N_RECON,
    TextConfig,
    attentional_pool,
    caption_loss,
    contrastive_loss,
    decoder_logits,
    init_align,
    init_pooler,
    pad_batch,
    text_embedding,
    text_forward,
)
from gridslide.align.train import (
    AlignConfig,
    AlignResult,
    Pair,
    align_train,
    crop_at_most,
    decoder_step_fn,
    embed_slides,
    embed_texts,
    generate_reports,
    read_captions,
    write_captions,
)
