#include "wsrtl/transformer.hpp"

#include <cmath>
#include <stdexcept>

namespace wsrtl {

template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Tensor<Scalar>* weights) {
  const Scalar inv = Scalar(1) / std::sqrt(static_cast<Scalar>(q.dim(-1)));
  auto w = ops::softmax_last(ops::scale(ops::bmm(q, k, true), inv));
  if (weights) *weights = w.value();
  return ops::bmm(w, v);
}

template <typename Scalar>
MultiHeadAttention<Scalar>::MultiHeadAttention(ParameterStore<Scalar>& store, const std::string& name, int d,
                                               int heads, std::mt19937_64& rng)
    : heads_(heads) {
  if (d % heads != 0) throw std::invalid_argument("attention width must divide into heads");
  const auto g = ParamGroup::backbone;
  q_ = Linear<Scalar>(store, name + ".q", g, d, d, rng);
  k_ = Linear<Scalar>(store, name + ".k", g, d, d, rng);
  v_ = Linear<Scalar>(store, name + ".v", g, d, d, rng);
  o_ = Linear<Scalar>(store, name + ".out", g, d, d, rng);
}

template <typename Scalar>
Var<Scalar> MultiHeadAttention<Scalar>::operator()(const Var<Scalar>& query, const Var<Scalar>& memory,
                                                   Tensor<Scalar>* weights) const {
  auto q = ops::split_heads(q_(query), heads_);
  auto k = ops::split_heads(k_(memory), heads_);
  auto v = ops::split_heads(v_(memory), heads_);
  return o_(ops::merge_heads(attention(q, k, v, weights), heads_));
}

template <typename Scalar>
FeedForward<Scalar>::FeedForward(ParameterStore<Scalar>& store, const std::string& name, int d, int hidden,
                                 std::mt19937_64& rng) {
  fc1 = Linear<Scalar>(store, name + ".fc1", ParamGroup::backbone, d, hidden, rng);
  fc2 = Linear<Scalar>(store, name + ".fc2", ParamGroup::backbone, hidden, d, rng);
}

template <typename Scalar>
EncoderLayer<Scalar>::EncoderLayer(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng) {
  const auto g = ParamGroup::backbone;
  attn_ = MultiHeadAttention<Scalar>(store, "encoder.self_attn", config.d, config.heads, rng);
  norm1_ = LayerNorm<Scalar>(store, "encoder.norm1", g, config.d);
  ffn_ = FeedForward<Scalar>(store, "encoder.ffn", config.d, config.ffn, rng);
  norm2_ = LayerNorm<Scalar>(store, "encoder.norm2", g, config.d);
}

template <typename Scalar>
Var<Scalar> EncoderLayer<Scalar>::operator()(const Var<Scalar>& x, AttentionTrace<Scalar>* trace) const {
  auto h = norm1_(ops::add(x, attn_(x, x, trace ? &trace->encoder_self : nullptr)));
  return norm2_(ops::add(h, ffn_(h)));
}

template <typename Scalar>
DecoderLayer<Scalar>::DecoderLayer(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng) {
  const auto g = ParamGroup::backbone;
  self_attn_ = MultiHeadAttention<Scalar>(store, "decoder.self_attn", config.d, config.heads, rng);
  norm1_ = LayerNorm<Scalar>(store, "decoder.norm1", g, config.d);
  cross_attn_ = MultiHeadAttention<Scalar>(store, "decoder.cross_attn", config.d, config.heads, rng);
  norm2_ = LayerNorm<Scalar>(store, "decoder.norm2", g, config.d);
  ffn_ = FeedForward<Scalar>(store, "decoder.ffn", config.d, config.ffn, rng);
  norm3_ = LayerNorm<Scalar>(store, "decoder.norm3", g, config.d);
}

template <typename Scalar>
Var<Scalar> DecoderLayer<Scalar>::operator()(const Var<Scalar>& queries, const Var<Scalar>& memory,
                                             AttentionTrace<Scalar>* trace) const {
  auto t = ops::broadcast0(queries, memory.dim(0));
  t = norm1_(ops::add(t, self_attn_(t, t, trace ? &trace->decoder_self : nullptr)));
  t = norm2_(ops::add(t, cross_attn_(t, memory, trace ? &trace->decoder_cross : nullptr)));
  return norm3_(ops::add(t, ffn_(t)));
}

template <typename Scalar>
RelationTransformer<Scalar>::RelationTransformer(ParameterStore<Scalar>& store, const ModelConfig& config,
                                                 std::mt19937_64& rng) {
  encoder_ = EncoderLayer<Scalar>(store, config, rng);
  decoder_ = DecoderLayer<Scalar>(store, config, rng);
  queries_ = store.add("decoder.queries", ParamGroup::backbone, init::normal<Scalar>({config.num_aus, config.d}, 0.02, rng));
}

template <typename Scalar>
RelationOutput<Scalar> RelationTransformer<Scalar>::operator()(const Var<Scalar>& left, const Var<Scalar>& right,
                                                               AttentionTrace<Scalar>* trace) const {
  if (left.shape() != right.shape()) throw std::invalid_argument("relation: side sequences differ in shape");
  const int b = left.dim(0);
  auto out = decode(encode(ops::concat0(std::vector{left, right}), trace), trace);
  RelationOutput<Scalar> r;
  r.left = ops::slice0(out, 0, b);
  r.right = ops::slice0(out, b, 2 * b);
  r.average = ops::scale(ops::add(r.left, r.right), Scalar(0.5));
  return r;
}

Eigen::MatrixXd query_similarity(const Eigen::MatrixXd& queries) {
  const Eigen::VectorXd norms = queries.rowwise().norm();
  if ((norms.array() <= 0).any()) throw std::invalid_argument("query_similarity: zero-norm query");
  const Eigen::MatrixXd unit = norms.cwiseInverse().asDiagonal() * queries;
  Eigen::MatrixXd m = unit * unit.transpose();
  m = (0.5 * (m + m.transpose())).eval();
  return m;
}

#define WSRTL_INSTANTIATE_TRANSFORMER(S)                                                         \
  template Var<S> attention<S>(const Var<S>&, const Var<S>&, const Var<S>&, Tensor<S>*);         \
  template class MultiHeadAttention<S>;                                                          \
  template struct FeedForward<S>;                                                                \
  template class EncoderLayer<S>;                                                                \
  template class DecoderLayer<S>;                                                                \
  template class RelationTransformer<S>;

WSRTL_INSTANTIATE_TRANSFORMER(float)
WSRTL_INSTANTIATE_TRANSFORMER(double)

}  // namespace wsrtl
