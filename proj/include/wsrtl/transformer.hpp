#pragma once

#include "wsrtl/backbone.hpp"
#include "wsrtl/nn.hpp"

namespace wsrtl {

/// softmax(Q K^T / sqrt(dk)) V over the last two dimensions. Q [B, Tq, dk],
/// K [B, Tk, dk], V [B, Tk, dv]. When `weights` is given it receives the
/// attention matrix [B, Tq, Tk].
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                      Tensor<Scalar>* weights = nullptr);

template <typename Scalar>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore<Scalar>& store, const std::string& name, int d, int heads, std::mt19937_64& rng);

  /// query [B, Tq, d], memory [B, Tk, d] -> [B, Tq, d]. Weights are
  /// [B * heads, Tq, Tk] when requested.
  Var<Scalar> operator()(const Var<Scalar>& query, const Var<Scalar>& memory, Tensor<Scalar>* weights = nullptr) const;

 private:
  Linear<Scalar> q_, k_, v_, o_;
  int heads_ = 1;
};

template <typename Scalar>
struct FeedForward {
  Linear<Scalar> fc1, fc2;

  FeedForward() = default;
  FeedForward(ParameterStore<Scalar>& store, const std::string& name, int d, int hidden, std::mt19937_64& rng);
  Var<Scalar> operator()(const Var<Scalar>& x) const { return fc2(ops::relu(fc1(x))); }
};

/// Attention maps of the last forward, for inspection.
template <typename Scalar>
struct AttentionTrace {
  Tensor<Scalar> encoder_self;
  Tensor<Scalar> decoder_self;
  Tensor<Scalar> decoder_cross;
};

/// Post-norm encoder block without positional embedding.
template <typename Scalar>
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng);
  Var<Scalar> operator()(const Var<Scalar>& x, AttentionTrace<Scalar>* trace = nullptr) const;

 private:
  MultiHeadAttention<Scalar> attn_;
  LayerNorm<Scalar> norm1_, norm2_;
  FeedForward<Scalar> ffn_;
};

/// Post-norm decoder block whose target sequence is the AU query bank:
/// query self-attention, cross-attention to the encoder output, feed-forward.
template <typename Scalar>
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng);
  /// queries [N, d] shared by all B sequences of memory [B, T, d].
  Var<Scalar> operator()(const Var<Scalar>& queries, const Var<Scalar>& memory,
                         AttentionTrace<Scalar>* trace = nullptr) const;

 private:
  MultiHeadAttention<Scalar> self_attn_, cross_attn_;
  LayerNorm<Scalar> norm1_, norm2_, norm3_;
  FeedForward<Scalar> ffn_;
};

template <typename Scalar>
struct RelationOutput {
  Var<Scalar> left;     // [B, N, d] decoder output of the left sequence
  Var<Scalar> right;    // [B, N, d]
  Var<Scalar> average;  // (left + right) / 2
};

/// One encoder and one decoder shared by both sides of the face.
template <typename Scalar>
class RelationTransformer {
 public:
  RelationTransformer() = default;
  RelationTransformer(ParameterStore<Scalar>& store, const ModelConfig& config, std::mt19937_64& rng);

  Var<Scalar> encode(const Var<Scalar>& x, AttentionTrace<Scalar>* trace = nullptr) const { return encoder_(x, trace); }
  Var<Scalar> decode(const Var<Scalar>& memory, AttentionTrace<Scalar>* trace = nullptr) const {
    return decoder_(queries_, memory, trace);
  }
  /// Both sides run as independent length-N sequences in one batch.
  RelationOutput<Scalar> operator()(const Var<Scalar>& left, const Var<Scalar>& right,
                                    AttentionTrace<Scalar>* trace = nullptr) const;

  /// AU query bank [N, d]: row i is AU i's query.
  const Var<Scalar>& queries() const { return queries_; }

 private:
  EncoderLayer<Scalar> encoder_;
  DecoderLayer<Scalar> decoder_;
  Var<Scalar> queries_;
};

/// Cosine similarity between query rows; throws on a zero-norm query.
Eigen::MatrixXd query_similarity(const Eigen::MatrixXd& queries);

}  // namespace wsrtl
