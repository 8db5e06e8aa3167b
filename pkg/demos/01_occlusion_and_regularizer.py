"""How much does one identifier word move a prediction, and what does penalizing it cost?

We build a tiny classifier, measure the occlusion importance of a lexicon
token in one sentence, check it against two plain forward passes, and then
split the regularized loss into its cross-entropy and penalty parts.

Run: python demos/01_occlusion_and_regularizer.py
"""

from upstream_debias.corpus import BiasFactorSpec, Example, build_vocab
from upstream_debias.model import EncoderConfig, add_head, harm_score, init_params
from upstream_debias.upstream import expl_reg_loss, occlusion_importance

vocab = build_vocab()
identifiers = vocab.lexicon(0)
model = init_params(EncoderConfig(vocab_size=len(vocab)), seed=0)
add_head(model, "B", n_classes=2, harmful=(1,), seed=1)

# One sentence mentioning an identifier twice; occlusion removes both copies.
word = min(identifiers)
sentence = vocab.ids("neutral")[:5] + [word, word]
print("sentence:", vocab.decode(sentence))

phi = occlusion_importance(model, sentence, word, "B").item()
rest = [t for t in sentence if t != word]
print(f"phi from the differentiable op : {phi:+.3e}")
print(f"phi from two forward passes    : {harm_score(model, sentence, 'B') - harm_score(model, rest, 'B'):+.3e}")

# The regularized loss is cross-entropy plus alpha * sum(phi^2) / batch size.
batch = [Example(tuple(sentence), 0), Example(tuple(vocab.ids("neutral")[5:10]), 1)]
factor = [BiasFactorSpec(0, "lexical", identifiers)]
ce = expl_reg_loss(model, batch, "B", factor, alpha=0.0).item()
for alpha in (0.03, 1.0, 10.0):
    total = expl_reg_loss(model, batch, "B", factor, alpha).item()
    print(f"alpha={alpha:<5} loss={total:.6f}  penalty={total - ce:.3e}  alpha*phi^2/2={alpha * phi**2 / 2:.3e}")
