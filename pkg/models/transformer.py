import torch
from timm.models.vision_transformer import Block
from torch import nn


class Transformer(nn.Module):
    """
    A stack of pre-norm ViT blocks followed by a final LayerNorm. Drop-path rates grow linearly from 0 to
    drop_path over the stack.
    """

    def __init__(self, width: int, depth: int, heads: int, mlp_ratio: float = 4.0, drop_path: float = 0.0):
        super().__init__()
        rates = torch.linspace(0, drop_path, depth).tolist() if depth > 1 else [drop_path]
        self.blocks = nn.ModuleList([Block(width, heads, mlp_ratio, qkv_bias=True, drop_path=rate) for rate in rates])
        self.norm = nn.LayerNorm(width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.norm(x)
