"""Inversion-free prompt-to-prompt editing loop for flow-matching models.

The editor advances an edit latent along the difference of the model's
velocity fields under the target and source prompts, evaluated on noised
versions of the source latent. Steps are indexed descending; indices above
``n_max`` are skipped outright (structure preservation) and the velocity
difference is only applied down to ``n_min`` (below that the edit latent is
carried unchanged, preserving fine detail).

The ``pipeline`` argument is a seam, not a concrete class. It must provide:

    encode_image(pil_image) -> latent tensor
    velocity(latent, t, prompt) -> tensor (d latent / d t toward noise at t)
    decode_latent(latent) -> pil_image
    timesteps(n_steps) -> descending sequence of floats in (0, 1]

``backends.FlowEditBackend`` builds this seam around a pretrained pipeline;
tests exercise the loop with a small synthetic model.
"""

from __future__ import annotations


def flowedit_sample(
    pipeline,
    image,
    *,
    source_prompt: str,
    target_prompt: str,
    n_min: int = 4,
    n_max: int = 10,
    n_steps: int = 28,
    generator=None,
):
    import torch

    if n_min > n_max:
        raise ValueError("n_min must not exceed n_max")
    x_src = pipeline.encode_image(image)
    ts = list(pipeline.timesteps(n_steps))
    if any(b >= a for a, b in zip(ts, ts[1:])):
        raise ValueError("pipeline timesteps must be strictly decreasing")

    z_edit = x_src.clone()
    for i, t in enumerate(ts):
        step_index = len(ts) - i  # counts down toward 1
        if step_index > n_max:
            continue
        t_next = ts[i + 1] if i + 1 < len(ts) else 0.0
        if step_index > n_min:
            noise = torch.randn(x_src.shape, generator=generator, dtype=x_src.dtype)
            z_src_t = (1.0 - t) * x_src + t * noise
            z_tgt_t = z_src_t + (z_edit - x_src)
            v_delta = pipeline.velocity(z_tgt_t, t, target_prompt) - pipeline.velocity(
                z_src_t, t, source_prompt
            )
            z_edit = z_edit + (t_next - t) * v_delta
        # below n_min the edit latent advances unchanged
    return pipeline.decode_latent(z_edit)
