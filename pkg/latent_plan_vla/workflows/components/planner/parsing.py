from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from latent_plan_vla.schemas.general.general import NUM_KEYPOINTS, PayloadKind
from latent_plan_vla.schemas.trajectories.trajectory import ParsedResponse, Trajectory
from latent_plan_vla.utils.formatters.general import parse_option_text, parse_trajectory_text, split_response
from latent_plan_vla.workflows.components.planner.vocab import ANSWER, ANSWER_END, TokenVocab


def parse_response_text(text: str, k: int = NUM_KEYPOINTS) -> ParsedResponse:
    """
    Apply the response grammar. A trajectory payload is valid only with exactly
    k points, all inside [0, 1]; an option payload is one letter A-D.
    Never raises.
    """
    parts = split_response(text)
    if parts is None:
        return ParsedResponse(text=text)
    reasoning, payload = parts
    pairs = parse_trajectory_text(payload)
    if pairs is not None:
        ok = len(pairs) == k and all(0.0 <= x <= 1.0 and 0.0 <= y <= 1.0 for x, y in pairs)
        if ok:
            return ParsedResponse(text=text, reasoning=reasoning, format_ok=True,
                                  payload_kind=PayloadKind.TRAJECTORY, trajectory=Trajectory.from_xy(pairs))
        return ParsedResponse(text=text, reasoning=reasoning, format_ok=True)
    option = parse_option_text(payload)
    if option is not None:
        return ParsedResponse(text=text, reasoning=reasoning, format_ok=True,
                              payload_kind=PayloadKind.CHOICE, option=option)
    return ParsedResponse(text=text, reasoning=reasoning, format_ok=True)


def response_text(tokens: Sequence[int], vocab: TokenVocab) -> str:
    """Detokenized response up to (not including) the first EOS."""
    tokens = np.asarray(tokens, dtype=np.int64)
    eos = np.flatnonzero(tokens == vocab.eos_id)
    if eos.size:
        tokens = tokens[:eos[0]]
    return vocab.detokenize(tokens)


def parse_response(tokens: Sequence[int], vocab: TokenVocab, k: int = NUM_KEYPOINTS) -> ParsedResponse:
    """
    Token-level entry point: detokenize up to EOS and apply the grammar, then
    take trajectory coordinates straight from the bin tokens as their centres
    (i + 0.5) / B rather than from the 3-decimal rendering.
    """
    tokens = [int(t) for t in np.asarray(tokens, dtype=np.int64)]
    parsed = parse_response_text(response_text(tokens, vocab), k)
    if parsed.payload_kind is not PayloadKind.TRAJECTORY:
        return parsed
    start = tokens.index(vocab.id(ANSWER)) + 1
    end = tokens.index(vocab.id(ANSWER_END), start)
    coords = [vocab.coord_value(i) for i in tokens[start:end] if vocab.is_coord(i)]
    return replace(parsed, trajectory=Trajectory.from_xy(zip(coords[0::2], coords[1::2])))
