#pragma once

// Text stream: a small anatomical vocabulary with a fault-tolerant greedy
// tokenizer, a frozen randomly-initialized transformer encoder, a trainable
// prompt bank, fixed anchor embeddings and the query-anchor regularizer.
// Only the prompt bank ever trains; everything else is constant after
// construction.

#include "emfuse/ops.hpp"
#include "emfuse/tensor.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace emfuse {

// ---------------------------------------------------------------------------
// Vocabulary and tokenizer
// ---------------------------------------------------------------------------

class Vocabulary {
public:
    static Vocabulary medical_default() {
        Vocabulary v;
        v.add("<unk>");
        for (const char* term : {"left ventricle", "myocardium", "right ventricle", "background", "left", "right",
                                 "ventricle", "cardiac", "heart"}) {
            v.add(term);
        }
        for (const char* sub : {"myocardi", "ventric", "cardi", "back", "ground", "ium"}) v.add(sub);
        for (char c = 0x20; c <= 0x7e; ++c) v.add(std::string(1, c));
        return v;
    }

    int add(const std::string& term) {
        auto it = term_to_id_.find(term);
        if (it != term_to_id_.end()) return it->second;
        const int id = static_cast<int>(id_to_term_.size());
        term_to_id_.emplace(term, id);
        id_to_term_.push_back(term);
        max_term_len_ = std::max(max_term_len_, term.size());
        return id;
    }

    int size() const { return static_cast<int>(id_to_term_.size()); }
    int unk_id() const { return term_to_id_.at("<unk>"); }
    bool contains(const std::string& term) const { return term_to_id_.count(term) > 0; }
    int id(const std::string& term) const {
        auto it = term_to_id_.find(term);
        if (it == term_to_id_.end()) throw std::invalid_argument("vocabulary: unknown term '" + term + "'");
        return it->second;
    }
    const std::string& term(int id) const { return id_to_term_.at(static_cast<std::size_t>(id)); }

    // Greedy longest match over every vocabulary entry. Printable ASCII is
    // always covered by the single-character tokens, so unknowns only arise
    // from non-ASCII codepoints (one UNK each) or control characters.
    std::vector<int> tokenize(const std::string& text) const {
        if (text.empty()) throw std::invalid_argument("tokenize: empty string");
        std::vector<int> out;
        std::size_t pos = 0;
        while (pos < text.size()) {
            const unsigned char lead = static_cast<unsigned char>(text[pos]);
            if (lead >= 0x80) {
                out.push_back(unk_id());
                ++pos;
                while (pos < text.size() && (static_cast<unsigned char>(text[pos]) & 0xc0) == 0x80) ++pos;
                continue;
            }
            const std::size_t cap = std::min(max_term_len_, text.size() - pos);
            int matched = -1;
            std::size_t matched_len = 0;
            for (std::size_t len = cap; len >= 1; --len) {
                auto it = term_to_id_.find(text.substr(pos, len));
                if (it != term_to_id_.end()) {
                    matched = it->second;
                    matched_len = len;
                    break;
                }
            }
            if (matched >= 0) {
                out.push_back(matched);
                pos += matched_len;
            } else {
                out.push_back(unk_id());
                ++pos;
            }
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw std::runtime_error("vocabulary: cannot open " + path + " for writing");
        for (std::size_t i = 0; i < id_to_term_.size(); ++i) {
            os << id_to_term_[i] << '\t' << i << '\n';
        }
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("vocabulary: cannot open " + path);
        std::vector<std::pair<std::string, int>> entries;
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const std::size_t tab = line.rfind('\t');
            if (tab == std::string::npos) throw std::runtime_error("vocabulary: malformed line '" + line + "'");
            entries.emplace_back(line.substr(0, tab), std::stoi(line.substr(tab + 1)));
        }
        std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
        Vocabulary v;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].second != static_cast<int>(i)) throw std::runtime_error("vocabulary: ids not dense from 0");
            v.add(entries[i].first);
        }
        if (!v.contains("<unk>")) throw std::runtime_error("vocabulary: missing <unk> entry");
        return v;
    }

private:
    std::unordered_map<std::string, int> term_to_id_;
    std::vector<std::string> id_to_term_;
    std::size_t max_term_len_ = 0;
};

// ---------------------------------------------------------------------------
// Frozen encoder
// ---------------------------------------------------------------------------

struct TextConfig {
    int d_emb = 64;
    int heads = 2;
    int blocks = 3;
    int n_prompts = 4;
    int max_len = 32;
    double tau_reg = 0.07;
};

namespace detail {

struct EncoderBlock {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
};

// Pre-norm block applied to one (L, d) sequence.
inline Tensor run_encoder_block(const Tensor& x, const EncoderBlock& blk, int heads) {
    const int len = x.shape()[0], d = x.shape()[1];
    const int dh = d / heads;
    Tensor h = layer_norm(x, blk.ln1_g, blk.ln1_b);
    Tensor q = permute(reshape(add(matmul(h, blk.wq), blk.bq), {len, heads, dh}), {1, 0, 2});
    Tensor k = permute(reshape(add(matmul(h, blk.wk), blk.bk), {len, heads, dh}), {1, 0, 2});
    Tensor v = permute(reshape(add(matmul(h, blk.wv), blk.bv), {len, heads, dh}), {1, 0, 2});
    Tensor attn = softmax(scale(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh))), 2);
    Tensor ctx = reshape(permute(bmm(attn, v), {1, 0, 2}), {len, d});
    Tensor with_attn = add(x, add(matmul(ctx, blk.wo), blk.bo));
    Tensor h2 = layer_norm(with_attn, blk.ln2_g, blk.ln2_b);
    Tensor mlp = add(matmul(gelu(add(matmul(h2, blk.w1), blk.b1)), blk.w2), blk.b2);
    return add(with_attn, mlp);
}

}  // namespace detail

// Three pre-norm transformer blocks over [prompts ; class-token embeddings],
// mean-pooled per class. Every parameter here is constant; gradients can only
// reach the prompt rows passed into encode_queries.
class TextEncoder {
public:
    TextEncoder(Vocabulary vocab, TextConfig cfg, std::uint64_t seed) : vocab_(std::move(vocab)), cfg_(cfg) {
        if (cfg_.d_emb % cfg_.heads != 0) throw std::invalid_argument("text encoder: d_emb must divide by heads");
        Rng rng(Rng::derive(seed, 0x7e));
        const int d = cfg_.d_emb;
        const double w_std = std::sqrt(1.0 / d);
        embeddings_ = random_normal({vocab_.size(), d}, 0.02, rng);
        positions_ = random_normal({cfg_.max_len, d}, 0.02, rng);
        for (int b = 0; b < cfg_.blocks; ++b) {
            detail::EncoderBlock blk;
            blk.ln1_g = Tensor::full({d}, 1.0);
            blk.ln1_b = Tensor::zeros({d});
            blk.wq = random_normal({d, d}, w_std, rng);
            blk.bq = Tensor::zeros({d});
            blk.wk = random_normal({d, d}, w_std, rng);
            blk.bk = Tensor::zeros({d});
            blk.wv = random_normal({d, d}, w_std, rng);
            blk.bv = Tensor::zeros({d});
            blk.wo = random_normal({d, d}, w_std, rng);
            blk.bo = Tensor::zeros({d});
            blk.ln2_g = Tensor::full({d}, 1.0);
            blk.ln2_b = Tensor::zeros({d});
            blk.w1 = random_normal({d, 4 * d}, w_std, rng);
            blk.b1 = Tensor::zeros({4 * d});
            blk.w2 = random_normal({4 * d, d}, std::sqrt(1.0 / (4 * d)), rng);
            blk.b2 = Tensor::zeros({d});
            blocks_.push_back(std::move(blk));
        }
    }

    const Vocabulary& vocab() const { return vocab_; }
    const TextConfig& config() const { return cfg_; }

    // One pooled row per class: [prompt rows ; token embeddings] + positions,
    // through the frozen blocks, mean over positions.
    Tensor encode_queries(const Tensor& prompts, const std::vector<std::string>& class_names) const {
        if (prompts.rank() != 2 || prompts.shape()[1] != cfg_.d_emb) {
            throw std::invalid_argument("encode_queries: prompts must be n_p x d_emb");
        }
        std::vector<Tensor> rows;
        rows.reserve(class_names.size());
        for (const std::string& name : class_names) {
            rows.push_back(reshape(encode_one(&prompts, name), {1, cfg_.d_emb}));
        }
        return concat(rows, 0);
    }

    // Promptless pass over the class tokens alone; detached so the anchors
    // stay constant regardless of how they are used downstream.
    Tensor make_anchors(const std::vector<std::string>& class_names) const {
        std::vector<Tensor> rows;
        rows.reserve(class_names.size());
        for (const std::string& name : class_names) {
            rows.push_back(reshape(encode_one(nullptr, name), {1, cfg_.d_emb}));
        }
        return concat(rows, 0).detached();
    }

    std::uint64_t checksum() const {
        std::uint64_t h = checksum_bits(embeddings_.values());
        h = checksum_bits(positions_.values(), h);
        for (const detail::EncoderBlock& blk : blocks_) {
            for (const Tensor* t : {&blk.ln1_g, &blk.ln1_b, &blk.wq, &blk.bq, &blk.wk, &blk.bk, &blk.wv, &blk.bv,
                                    &blk.wo, &blk.bo, &blk.ln2_g, &blk.ln2_b, &blk.w1, &blk.b1, &blk.w2, &blk.b2}) {
                h = checksum_bits(t->values(), h);
            }
        }
        return h;
    }

private:
    Tensor encode_one(const Tensor* prompts, const std::string& name) const {
        const std::vector<int> tokens = vocab_.tokenize(name);
        const int n_p = prompts ? prompts->shape()[0] : 0;
        const int len = n_p + static_cast<int>(tokens.size());
        if (len > cfg_.max_len) {
            throw std::invalid_argument("encode: sequence for '" + name + "' exceeds max_len " +
                                        std::to_string(cfg_.max_len));
        }
        const int d = cfg_.d_emb;
        std::vector<double> tok(static_cast<std::size_t>(tokens.size()) * d);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const double* src = embeddings_.data() + static_cast<std::size_t>(tokens[i]) * d;
            std::copy(src, src + d, tok.begin() + i * d);
        }
        Tensor token_rows = Tensor::from({static_cast<int>(tokens.size()), d}, std::move(tok));
        Tensor seq = prompts ? concat({*prompts, token_rows}, 0) : token_rows;
        std::vector<double> pos(static_cast<std::size_t>(len) * d);
        std::copy(positions_.data(), positions_.data() + pos.size(), pos.begin());
        Tensor x = add(seq, Tensor::from({len, d}, std::move(pos)));
        for (const detail::EncoderBlock& blk : blocks_) x = detail::run_encoder_block(x, blk, cfg_.heads);
        return mean_axis(x, 0);
    }

    Vocabulary vocab_;
    TextConfig cfg_;
    Tensor embeddings_;
    Tensor positions_;
    std::vector<detail::EncoderBlock> blocks_;
};

// Gaussian(0, 0.02) prompt rows; the sole trainable piece of the text stream.
inline Tensor init_prompt_bank(const TextConfig& cfg, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x9b));
    Tensor p = random_normal({cfg.n_prompts, cfg.d_emb}, 0.02, rng);
    p.set_requires_grad(true);
    return p;
}

// Mean over classes of -log softmax(T R^T / tau) on the diagonal: each query
// is pulled toward its own anchor and away from the others.
inline Tensor text_reg_loss(const Tensor& queries, const Tensor& anchors, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("text_reg_loss: tau must be positive");
    if (queries.rank() != 2 || queries.shape() != anchors.shape()) {
        throw std::invalid_argument("text_reg_loss: shape mismatch " + shape_str(queries.shape()) + " vs " +
                                    shape_str(anchors.shape()));
    }
    Tensor sims = scale(matmul(queries, transpose(anchors)), 1.0 / tau);
    return mean(sub(logsumexp_last(sims), take_diag(sims)));
}

}  // namespace emfuse
