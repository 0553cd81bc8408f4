"""Frozen-trunk execution and top-weight extraction for a ViT-B/32-class
dual encoder.

The engine's trainable top expects pre-norm transformer blocks with biased
q/k/v/out projections, 1/sqrt(head_dim) attention scaling, the sigmoid-gated
fast GELU, a final layer norm at the pooled token and a bias-free projection
into the joint space. The CLIP family matches that block for block, so the
cut is exact: activations are the hidden states entering block D - L, and
the top checkpoint carries the last L blocks plus final norm and projection
in the engine's tensor layout.
"""

from dataclasses import dataclass

import numpy as np
import torch
from transformers import CLIPImageProcessor, CLIPModel, CLIPTokenizer

from hlkit.encoder import TransformerTopConfig

ENGINE_LN_EPS = 1e-5


class TrunkError(RuntimeError):
    pass


@dataclass
class DualEncoder:
    model: CLIPModel
    tokenizer: CLIPTokenizer
    image_processor: CLIPImageProcessor

    @property
    def vision_depth(self) -> int:
        return self.model.config.vision_config.num_hidden_layers

    @property
    def text_depth(self) -> int:
        return self.model.config.text_config.num_hidden_layers


def load_dual_encoder(weights_dir) -> DualEncoder:
    """Load a pretrained dual encoder from a local directory.

    Eager attention keeps the arithmetic identical to the engine's and
    deterministic across reruns.
    """
    model = CLIPModel.from_pretrained(weights_dir, attn_implementation="eager")
    model.eval()
    for config in (model.config.vision_config, model.config.text_config):
        if abs(config.layer_norm_eps - ENGINE_LN_EPS) > 0:
            raise TrunkError(
                f"layer_norm_eps {config.layer_norm_eps} differs from the "
                f"engine's fixed {ENGINE_LN_EPS}")
        if config.hidden_act != "quick_gelu":
            raise TrunkError(
                f"hidden_act {config.hidden_act!r} is not the sigmoid-gated "
                "fast GELU the engine implements")
    tokenizer = CLIPTokenizer.from_pretrained(weights_dir)
    image_processor = CLIPImageProcessor.from_pretrained(weights_dir)
    return DualEncoder(model=model, tokenizer=tokenizer,
                       image_processor=image_processor)


def tower_configs(encoder: DualEncoder, cut_depth: int):
    """Engine tower configs for the trainable top of depth ``cut_depth``."""
    cfg = encoder.model.config
    vision_tokens = (cfg.vision_config.image_size // cfg.vision_config.patch_size) ** 2 + 1
    vision = TransformerTopConfig(
        model_dim=cfg.vision_config.hidden_size,
        num_heads=cfg.vision_config.num_attention_heads,
        mlp_dim=cfg.vision_config.intermediate_size,
        num_layers=cut_depth,
        joint_dim=cfg.projection_dim,
        seq_len_max=vision_tokens,
        causal=False,
    )
    text = TransformerTopConfig(
        model_dim=cfg.text_config.hidden_size,
        num_heads=cfg.text_config.num_attention_heads,
        mlp_dim=cfg.text_config.intermediate_size,
        num_layers=cut_depth,
        joint_dim=cfg.projection_dim,
        seq_len_max=cfg.text_config.max_position_embeddings,
        causal=True,
    )
    return vision, text


def _check_cut(encoder: DualEncoder, cut_depth: int) -> None:
    if cut_depth < 0:
        raise TrunkError("cut_depth must be >= 0")
    if cut_depth > min(encoder.vision_depth, encoder.text_depth):
        raise TrunkError(
            f"cut_depth {cut_depth} exceeds the encoder depth "
            f"({encoder.vision_depth} vision / {encoder.text_depth} text layers)")


def _causal_additive_mask(num_tokens: int, dtype) -> torch.Tensor:
    mask = torch.zeros(num_tokens, num_tokens, dtype=dtype)
    mask.masked_fill_(torch.triu(torch.ones(num_tokens, num_tokens, dtype=torch.bool),
                                 diagonal=1), torch.finfo(dtype).min)
    return mask[None, None]


@torch.no_grad()
def vision_trunk_tokens(encoder: DualEncoder, frames, cut_depth: int) -> np.ndarray:
    """Token states entering vision block D - L for a batch of RGB frames.

    Returns (batch, tokens, hidden); the class token sits at position 0.
    """
    _check_cut(encoder, cut_depth)
    pixel_values = encoder.image_processor(images=list(frames),
                                           return_tensors="pt").pixel_values
    tower = encoder.model.vision_model
    hidden = tower.embeddings(pixel_values)
    hidden = tower.pre_layrnorm(hidden)
    for layer in tower.encoder.layers[: encoder.vision_depth - cut_depth]:
        hidden = layer(hidden, attention_mask=None)
    return hidden.to(torch.float32).numpy()


@torch.no_grad()
def text_trunk_tokens(encoder: DualEncoder, query: str, cut_depth: int):
    """Token states entering text block D - L plus the pooled position.

    Raises :class:`TrunkError` when the tokenized query exceeds the
    encoder's maximum sequence length.
    """
    _check_cut(encoder, cut_depth)
    tower = encoder.model.text_model
    encoded = encoder.tokenizer(query, return_tensors="pt", truncation=False)
    input_ids = encoded.input_ids
    max_len = encoder.model.config.text_config.max_position_embeddings
    if input_ids.shape[1] > max_len:
        raise TrunkError(
            f"query tokenizes to {input_ids.shape[1]} tokens, encoder allows {max_len}")
    hidden = tower.embeddings(input_ids=input_ids)
    mask = _causal_additive_mask(input_ids.shape[1], hidden.dtype)
    for layer in tower.encoder.layers[: encoder.text_depth - cut_depth]:
        hidden = layer(hidden, attention_mask=mask)

    eos_token_id = encoder.model.config.text_config.eos_token_id
    if eos_token_id == 2:
        # legacy configs predate the corrected eos id; the pooled position is
        # the highest token id, exactly as the reference model computes it
        pool_index = int(input_ids.to(torch.int).argmax(dim=-1)[0])
    else:
        pool_index = int((input_ids[0] == eos_token_id).to(torch.int).argmax())
    return hidden[0].to(torch.float32).numpy(), pool_index


def _linear(tensor: torch.Tensor) -> np.ndarray:
    # torch Linear stores (out, in); the engine computes x @ W with W (in, out)
    return tensor.detach().to(torch.float32).numpy().T.copy()


def _vector(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().to(torch.float32).numpy().copy()


def _tower_top_params(layers, final_norm, projection, cut_depth: int, depth: int) -> dict:
    params = {}
    for offset in range(cut_depth):
        layer = layers[depth - cut_depth + offset]
        p = f"layers.{offset}."
        params[p + "ln1.gain"] = _vector(layer.layer_norm1.weight)
        params[p + "ln1.bias"] = _vector(layer.layer_norm1.bias)
        for name, proj in (("q", layer.self_attn.q_proj), ("k", layer.self_attn.k_proj),
                           ("v", layer.self_attn.v_proj), ("o", layer.self_attn.out_proj)):
            params[p + f"attn.w_{name}"] = _linear(proj.weight)
            params[p + f"attn.b_{name}"] = _vector(proj.bias)
        params[p + "ln2.gain"] = _vector(layer.layer_norm2.weight)
        params[p + "ln2.bias"] = _vector(layer.layer_norm2.bias)
        params[p + "mlp.w1"] = _linear(layer.mlp.fc1.weight)
        params[p + "mlp.b1"] = _vector(layer.mlp.fc1.bias)
        params[p + "mlp.w2"] = _linear(layer.mlp.fc2.weight)
        params[p + "mlp.b2"] = _vector(layer.mlp.fc2.bias)
    params["final.ln.gain"] = _vector(final_norm.weight)
    params["final.ln.bias"] = _vector(final_norm.bias)
    params["final.proj"] = _linear(projection.weight)
    return params


def top_params(encoder: DualEncoder, cut_depth: int):
    """Pretrained weights of both trainable tops in the engine's layout,
    ordered exactly like the engine's parameter directory."""
    _check_cut(encoder, cut_depth)
    model = encoder.model
    params_vision = _tower_top_params(
        model.vision_model.encoder.layers, model.vision_model.post_layernorm,
        model.visual_projection, cut_depth, encoder.vision_depth)
    params_text = _tower_top_params(
        model.text_model.encoder.layers, model.text_model.final_layer_norm,
        model.text_projection, cut_depth, encoder.text_depth)
    return params_vision, params_text


def _features(output) -> torch.Tensor:
    # transformers >= 5 returns a ModelOutput with the projected embeddings in
    # pooler_output; earlier versions return the tensor directly
    return output.pooler_output if hasattr(output, "pooler_output") else output


@torch.no_grad()
def reference_image_embeddings(encoder: DualEncoder, frames) -> np.ndarray:
    """Full-model joint-space embeddings (the parity oracle for the cut)."""
    pixel_values = encoder.image_processor(images=list(frames),
                                           return_tensors="pt").pixel_values
    out = _features(encoder.model.get_image_features(pixel_values=pixel_values))
    return out.to(torch.float32).numpy()


@torch.no_grad()
def reference_text_embedding(encoder: DualEncoder, query: str) -> np.ndarray:
    encoded = encoder.tokenizer(query, return_tensors="pt", truncation=False)
    out = _features(encoder.model.get_text_features(input_ids=encoded.input_ids))
    return out[0].to(torch.float32).numpy()
