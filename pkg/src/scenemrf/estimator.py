"""Estimator wrapper: ``fit`` trains the energy model end to end,
``predict_proba`` returns per-node marginals and ``predict`` assignments."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import energy as em
from ._validation import check_items
from .bp import infer_marginals
from .graph import Vocabulary, build_scene_mrf
from .map_inference import constrained_refine_mcmc, mplp_map
from .metrics import recall_at_k
from .posenc import make_frequency_set

log = logging.getLogger(__name__)


class SceneGrounder(BaseEstimator):
    """Grounds query graphs onto candidate boxes with a learned Scene-MRF.

    Parameters mirror :class:`scenemrf.energy.TrainConfig`; ``warm_start``
    continues training from the current weights and optimizer state up to
    ``steps`` total updates.
    """

    def __init__(
        self,
        hidden=64,
        attn_dim=32,
        n_freqs=128,
        theta_max=48,
        theta_low=6,
        lr=3e-3,
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        batch_size=20,
        steps=1500,
        dropout_p=0.2,
        loss="bp",
        seed=0,
        warm_start=False,
        bp_max_iters=50,
        bp_damping=0.5,
        bp_tol=1e-6,
    ):
        self.hidden = hidden
        self.attn_dim = attn_dim
        self.n_freqs = n_freqs
        self.theta_max = theta_max
        self.theta_low = theta_low
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.batch_size = batch_size
        self.steps = steps
        self.dropout_p = dropout_p
        self.loss = loss
        self.seed = seed
        self.warm_start = warm_start
        self.bp_max_iters = bp_max_iters
        self.bp_damping = bp_damping
        self.bp_tol = bp_tol

    _CONFIG_FIELDS = (
        "lr", "beta1", "beta2", "eps", "batch_size", "steps", "dropout_p", "seed",
        "hidden", "attn_dim", "n_freqs", "theta_max", "theta_low", "loss",
    )

    def train_config(self):
        return em.TrainConfig(**{k: getattr(self, k) for k in self._CONFIG_FIELDS})

    @classmethod
    def from_train_config(cls, config, **kwargs):
        return cls(**{k: getattr(config, k) for k in cls._CONFIG_FIELDS}, **kwargs)

    def _initialize(self, items, vocab):
        if vocab is None:
            n_obj = 1 + max(n.category for it in items for n in it.query.nodes if not n.generic)
            n_rel = 1 + max((e.rel for it in items for e in it.query.edges), default=0)
            vocab = Vocabulary(tuple(f"c{i}" for i in range(n_obj)), tuple(f"r{i}" for i in range(n_rel)))
        self.vocabulary_ = vocab
        self.frequencies_ = make_frequency_set(self.theta_max, self.theta_low, self.n_freqs, self.seed)
        dim = items[0].candidates.features.shape[1] + self.frequencies_.dim
        self.params_ = em.init_params(
            dim, len(vocab.objects), len(vocab.relations), self.hidden, self.attn_dim, self.seed
        )
        self.adam_ = em.AdamState.fresh(self.params_)
        self.loss_history_ = []

    def fit(self, items, vocab=None, callback=None):
        """Train on ``items``; ``callback(step, loss)`` runs after every update."""
        items = check_items(items, skip_invalid=True)
        config = self.train_config()
        if not (self.warm_start and hasattr(self, "params_")):
            self._initialize(items, vocab)
        x0s = [em.input_features(it.candidates, self.frequencies_) for it in items]
        n = len(items)
        for step in range(self.adam_.step, config.steps):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, step]))
            batch = rng.choice(n, min(config.batch_size, n), replace=False)
            seeds = [[config.seed, step, int(b)] for b in batch]
            loss, grads = em.loss_and_grads(
                self.params_, [items[b] for b in batch], self.frequencies_, seeds, config,
                [x0s[b] for b in batch],
            )
            self.params_, self.adam_ = em.adam_step(self.params_, grads, self.adam_, config)
            self.loss_history_.append((step, loss))
            if callback is not None:
                callback(step, loss)
        return self

    # -- inference ---------------------------------------------------------

    def energy_tables(self, item):
        """Constant ``(unary, pairwise)`` tables for ``item``'s candidates.

        They do not depend on the query, so callers evaluating several
        query variants of one item can compute them once.
        """
        check_is_fitted(self, "params_")
        return em.energies(self.params_, item.candidates, self.frequencies_)

    def scene_mrf(self, item, query=None, tables=None):
        """Scene-MRF of ``item`` (or an edited ``query``) with constant energies."""
        un, pw = self.energy_tables(item) if tables is None else tables
        return build_scene_mrf(item.query if query is None else query, un, pw)

    def marginals(self, item, query=None, tables=None):
        m = self.scene_mrf(item, query, tables)
        return infer_marginals(m, self.bp_max_iters, self.bp_damping, self.bp_tol)

    def predict_proba(self, items, queries=None):
        """Per-item :class:`~scenemrf.bp.BPResult`; loopy BP handles cyclic queries."""
        return [self.marginals(item, None if queries is None else queries[k]) for k, item in enumerate(items)]

    def predict(self, items, mode="marginal", mcmc_steps=2000):
        """Assignments per item: marginal argmax, MPLP MAP, or distinct MAP."""
        out = []
        for item in items:
            m = self.scene_mrf(item)
            if mode == "marginal":
                res = infer_marginals(m, self.bp_max_iters, self.bp_damping, self.bp_tol)
                out.append({i: int(np.argmax(p)) for i, p in res.marginals.items()})
            elif mode == "map":
                out.append(mplp_map(m).assignment)
            elif mode == "map-distinct":
                init = mplp_map(m).assignment
                out.append(constrained_refine_mcmc(m, init, mcmc_steps, self.seed).assignment)
            else:
                raise ValueError(f"unknown mode {mode!r}")
        return out

    def score(self, items, k=1):
        """Mean node recall@k over ``items``."""
        hits = []
        for item, res in zip(items, self.predict_proba(items)):
            h, _ = recall_at_k(res, item, k)
            hits.extend(h.values())
        return float(np.mean(hits))

    # -- persistence -------------------------------------------------------

    def save(self, path, extra=None):
        check_is_fitted(self, "params_")
        em.save_checkpoint(path, self.params_, self.frequencies_, self.vocabulary_, self.train_config(),
                           self.adam_, extra)

    @classmethod
    def load(cls, path):
        params, freqs, vocab, config, state, extra = em.load_checkpoint(path)
        est = cls.from_train_config(config)
        est.params_ = params
        est.frequencies_ = freqs
        est.vocabulary_ = vocab
        est.adam_ = state if state is not None else em.AdamState.fresh(params)
        est.loss_history_ = [tuple(x) for x in extra.get("loss_history", [])]
        return est
