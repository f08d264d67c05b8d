#!/usr/bin/env python3
"""
Sequence Encoders
Recurrent encoders producing local (per-step) and global (holistic) representations
of clip and token sequences, plus the linear clip embedding.
"""

from typing import Optional, Tuple

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .schema import ConfigurationError, DegenerateInputError, EncodedQuestion, EncodedVideo


class SequenceEncoder(nn.Module):
    """LSTM over a feature sequence; the global output is the last hidden state"""

    def __init__(self, input_size: int, hidden_size: int, bidirectional: bool = True):
        super().__init__()
        if bidirectional and hidden_size % 2:
            raise ConfigurationError(
                f"hidden_size must be even for a bidirectional encoder, got {hidden_size}"
            )
        self.hidden_size = hidden_size
        self.bidirectional = bidirectional
        self.lstm = nn.LSTM(
            input_size,
            hidden_size // 2 if bidirectional else hidden_size,
            batch_first=True,
            bidirectional=bidirectional,
        )

    def forward(
        self, x: torch.Tensor, lengths: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Encode a batch of sequences

        Args:
            x: B x T x input_size features
            lengths: Optional B valid lengths; rows past a length come back as zeros

        Returns:
            Tuple of (B x T x hidden_size local states, B x hidden_size global state)
        """
        if x.dim() != 3 or x.shape[1] == 0:
            raise DegenerateInputError("SequenceEncoder needs at least one step per sequence")

        if lengths is None:
            local, (h_n, _) = self.lstm(x)
        else:
            lengths = lengths.to("cpu", torch.long)
            if bool((lengths < 1).any()):
                raise DegenerateInputError("Every sequence must have at least one valid step")
            packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
            packed_out, (h_n, _) = self.lstm(packed)
            local, _ = pad_packed_sequence(packed_out, batch_first=True, total_length=x.shape[1])

        if self.bidirectional:
            global_state = torch.cat([h_n[-2], h_n[-1]], dim=-1)
        else:
            global_state = h_n[-1]
        return local, global_state


class VideoQAEncoder(nn.Module):
    """Two independent encoders for clips and question tokens"""

    def __init__(self, input_size: int, hidden_size: int, bidirectional: bool = True):
        super().__init__()
        self.video_encoder = SequenceEncoder(input_size, hidden_size, bidirectional)
        self.question_encoder = SequenceEncoder(input_size, hidden_size, bidirectional)
        self.video_linear = nn.Linear(input_size, hidden_size)

    def encode_video(
        self, clips: torch.Tensor, lengths: Optional[torch.Tensor] = None
    ) -> EncodedVideo:
        """Recurrent clip encoding (B x K x d -> K x d_h locals, d_h global)"""
        local, global_state = self.video_encoder(clips, lengths)
        return EncodedVideo(v_local=local, v_global=global_state)

    def encode_question(
        self, tokens: torch.Tensor, lengths: Optional[torch.Tensor] = None
    ) -> EncodedQuestion:
        """Recurrent token encoding (B x L x d -> L x d_h locals, d_h global)"""
        local, global_state = self.question_encoder(tokens, lengths)
        return EncodedQuestion(q_local=local, q_global=global_state)

    def embed_video_linear(self, clips: torch.Tensor) -> torch.Tensor:
        """Per-clip affine embedding (B x K x d -> B x K x d_h)"""
        if clips.shape[-2] == 0:
            raise DegenerateInputError("embed_video_linear needs at least one clip")
        return self.video_linear(clips)
