"""Task heads: category, relation, token, entity projection and sentence-pair scoring."""
import numpy as np

from model.layers import Linear, Module, init_normal
from numerics import Parameter, Tensor, concat, relu


class TaskHeads(Module):
    def __init__(self, width: int, num_categories: int, num_relations: int, vocab_size: int,
                 rng: np.random.Generator, std: float):
        self.category = Linear(width, num_categories, rng, std)
        self.relation_hidden = Linear(2 * width, width, rng, std)
        self.relation = Linear(width, num_relations, rng, std)
        self.token = Linear(width, vocab_size, rng, std)
        self.project_in = Parameter(init_normal(rng, (width, width), std), name='project_in')
        self.project_out = Parameter(init_normal(rng, (width, width), std), name='project_out')
        self.pair_hidden = Linear(width, width, rng, std)
        self.pair_out = Linear(width, 1, rng, std)

    def category_logits(self, entities: Tensor) -> Tensor:
        return self.category(entities)

    def relation_logits(self, heads: Tensor, tails: Tensor) -> Tensor:
        """
        One hidden ReLU layer over the (head, tail) concatenation.

        Order matters: (head, tail) and (tail, head) are different inputs.
        """
        return self.relation(relu(self.relation_hidden(concat([heads, tails], axis=-1))))

    def token_logits(self, hidden: Tensor) -> Tensor:
        return self.token(hidden)

    def project(self, mention: Tensor) -> Tensor:
        """g(x) = ReLU(x W1) W2, mapping mention vectors into the memory space."""
        return relu(mention @ self.project_in) @ self.project_out

    def pair_score(self, cls: Tensor) -> Tensor:
        """Scalar match score per row of [CLS] embeddings, shape (n,)."""
        hidden = relu(self.pair_hidden(cls))
        out = self.pair_out(hidden)
        return out.reshape(out.shape[0])
