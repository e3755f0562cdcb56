#include "entlink/qkd.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <sstream>

#include "entlink/rng.hpp"

namespace entlink {

RawKeyPair sift(const std::vector<CoincidencePair>& pairs) {
    RawKeyPair raw;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const PolChannel ca = pairs[i].alice.pol_channel();
        const PolChannel cb = pairs[i].bob.pol_channel();
        if (basis_of(ca) != basis_of(cb)) continue;
        raw.alice_bits.push_back(outcome_of(ca) == Outcome::plus ? 0 : 1);
        // singlet anticorrelation: Bob flips
        raw.bob_bits.push_back(outcome_of(cb) == Outcome::plus ? 1 : 0);
        raw.bases.push_back(basis_of(ca));
        raw.source_indices.push_back(static_cast<std::uint32_t>(i));
    }
    return raw;
}

QberEstimate estimate_qber(RawKeyPair& raw, const QberMode& mode) {
    if (raw.empty()) throw std::invalid_argument("estimate_qber on an empty key");
    QberEstimate est;
    if (mode.kind == QberMode::Kind::oracle) {
        for (std::size_t i = 0; i < raw.size(); ++i) {
            if (raw.alice_bits[i] != raw.bob_bits[i]) ++est.errors;
        }
        est.compared = raw.size();
        est.qber = static_cast<double>(est.errors) / static_cast<double>(est.compared);
        return est;
    }
    if (!(mode.fraction > 0.0 && mode.fraction <= 1.0)) {
        throw std::invalid_argument("sampling fraction must lie in (0, 1]");
    }
    const auto n = raw.size();
    auto k = static_cast<std::size_t>(std::floor(mode.fraction * static_cast<double>(n)));
    if (k == 0) k = 1;
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mode.seed);
    for (std::size_t i = 0; i < k; ++i) {  // partial Fisher-Yates
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(order[i], order[j]);
    }
    std::vector<bool> sampled(n, false);
    for (std::size_t i = 0; i < k; ++i) sampled[order[i]] = true;
    RawKeyPair remaining;
    for (std::size_t i = 0; i < n; ++i) {
        if (sampled[i]) {
            ++est.compared;
            if (raw.alice_bits[i] != raw.bob_bits[i]) ++est.errors;
        } else {
            remaining.alice_bits.push_back(raw.alice_bits[i]);
            remaining.bob_bits.push_back(raw.bob_bits[i]);
            remaining.bases.push_back(raw.bases[i]);
            remaining.source_indices.push_back(raw.source_indices[i]);
        }
    }
    est.bits_disclosed = est.compared;
    est.qber = static_cast<double>(est.errors) / static_cast<double>(est.compared);
    raw = std::move(remaining);
    return est;
}

namespace {

// Two-party cascade state, Alice as the reference side. Parity bookkeeping
// is incremental: flipping a Bob bit toggles the parity difference of the
// containing block in every pass built so far.
class CascadeSession {
public:
    CascadeSession(const RawKeyPair& raw, double qber_hint, int passes, std::uint64_t seed)
        : alice_(raw.alice_bits), bob_(raw.bob_bits), n_(raw.alice_bits.size()) {
        transcript_.passes = passes;
        const auto k1 = static_cast<std::size_t>(std::ceil(0.73 / qber_hint));
        std::uint64_t seq = seed;
        std::size_t block = std::max<std::size_t>(k1, 1);
        for (int p = 0; p < passes; ++p) {
            Pass pass;
            pass.block_size = std::min(block, n_);
            pass.to_master.resize(n_);
            std::iota(pass.to_master.begin(), pass.to_master.end(), 0);
            if (p > 0) {
                const std::uint64_t shuffle_seed = splitmix64(seq);
                transcript_.shuffle_seeds.push_back(shuffle_seed);
                Rng rng(shuffle_seed);
                for (std::size_t i = n_ - 1; i > 0; --i) {
                    const std::size_t j = static_cast<std::size_t>(rng.below(i + 1));
                    std::swap(pass.to_master[i], pass.to_master[j]);
                }
            }
            pass.to_pass.resize(n_);
            for (std::size_t i = 0; i < n_; ++i) pass.to_pass[pass.to_master[i]] = i;
            passes_.push_back(std::move(pass));
            if (block <= n_ / 2) block *= 2;
        }
    }

    ReconciliationTranscript run() {
        for (std::size_t p = 0; p < passes_.size(); ++p) {
            open_pass(p);
            drain();
        }
        final_verify();
        transcript_.converged = (alice_ == bob_);
        transcript_.parity_bits_disclosed = transcript_.records.size();
        return std::move(transcript_);
    }

    const std::vector<std::uint8_t>& corrected_bob() const { return bob_; }

private:
    struct Pass {
        std::size_t block_size = 0;
        std::vector<std::size_t> to_master;  // pass position -> master index
        std::vector<std::size_t> to_pass;    // master index -> pass position
        std::vector<std::uint8_t> diff;      // per block: parity of alice^bob
        bool open = false;
    };

    std::uint8_t range_parity(const std::vector<std::uint8_t>& bits, const Pass& pass,
                              std::size_t lo, std::size_t hi) const {
        std::uint8_t par = 0;
        for (std::size_t i = lo; i < hi; ++i) par ^= bits[pass.to_master[i]];
        return par;
    }

    void disclose(std::uint32_t pass_id, std::size_t lo, std::size_t hi, std::uint8_t value) {
        transcript_.records.push_back({pass_id, static_cast<std::uint32_t>(lo),
                                       static_cast<std::uint32_t>(hi - lo), value});
    }

    void open_pass(std::size_t p) {
        Pass& pass = passes_[p];
        const std::size_t nblocks = (n_ + pass.block_size - 1) / pass.block_size;
        pass.diff.assign(nblocks, 0);
        for (std::size_t blk = 0; blk < nblocks; ++blk) {
            const std::size_t lo = blk * pass.block_size;
            const std::size_t hi = std::min(lo + pass.block_size, n_);
            const std::uint8_t ap = range_parity(alice_, pass, lo, hi);
            disclose(static_cast<std::uint32_t>(p), lo, hi, ap);
            const std::uint8_t bp = range_parity(bob_, pass, lo, hi);
            pass.diff[blk] = ap ^ bp;
            if (pass.diff[blk]) queue_.push_back({p, blk});
        }
        pass.open = true;
    }

    // binary search down the block, correcting exactly one Bob bit
    void correct_block(std::size_t p, std::size_t blk) {
        Pass& pass = passes_[p];
        std::size_t lo = blk * pass.block_size;
        std::size_t hi = std::min(lo + pass.block_size, n_);
        while (hi - lo > 1) {
            const std::size_t mid = lo + (hi - lo + 1) / 2;
            const std::uint8_t ap = range_parity(alice_, pass, lo, mid);
            disclose(static_cast<std::uint32_t>(p), lo, mid, ap);
            if (ap != range_parity(bob_, pass, lo, mid)) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        flip(pass.to_master[lo]);
    }

    void flip(std::size_t master) {
        bob_[master] ^= 1;
        ++transcript_.bits_corrected;
        for (std::size_t p = 0; p < passes_.size(); ++p) {
            Pass& pass = passes_[p];
            if (!pass.open) continue;
            const std::size_t blk = pass.to_pass[master] / pass.block_size;
            pass.diff[blk] ^= 1;
            if (pass.diff[blk]) queue_.push_back({p, blk});
        }
    }

    void drain() {
        while (!queue_.empty()) {
            const auto [p, blk] = queue_.front();
            queue_.pop_front();
            if (!passes_[p].diff[blk]) continue;  // already fixed by backtracking
            correct_block(p, blk);
        }
    }

    // whole-key verification parity; sweeps out any odd residual
    void final_verify() {
        if (n_ == 0 || passes_.empty()) return;
        const Pass& first = passes_.front();
        for (std::size_t guard = 0; guard <= n_; ++guard) {
            const std::uint8_t ap = range_parity(alice_, first, 0, n_);
            disclose(static_cast<std::uint32_t>(passes_.size()), 0, n_, ap);
            if (ap == range_parity(bob_, first, 0, n_)) return;
            std::size_t lo = 0;
            std::size_t hi = n_;
            while (hi - lo > 1) {
                const std::size_t mid = lo + (hi - lo + 1) / 2;
                const std::uint8_t half = range_parity(alice_, first, lo, mid);
                disclose(static_cast<std::uint32_t>(passes_.size()), lo, mid, half);
                if (half != range_parity(bob_, first, lo, mid)) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            flip(first.to_master[lo]);
            drain();
        }
    }

    std::vector<std::uint8_t> alice_;
    std::vector<std::uint8_t> bob_;
    std::size_t n_;
    std::vector<Pass> passes_;
    std::deque<std::pair<std::size_t, std::size_t>> queue_;
    ReconciliationTranscript transcript_;
};

}  // namespace

CascadeResult cascade(const RawKeyPair& raw, double qber_hint, int passes, std::uint64_t seed) {
    if (!(qber_hint > 0.0 && qber_hint < 0.15)) {
        throw std::invalid_argument("qber_hint must lie in (0, 0.15)");
    }
    if (passes < 1) throw std::invalid_argument("cascade needs at least one pass");
    CascadeResult result;
    result.corrected = raw;
    if (raw.empty()) {
        result.transcript.passes = passes;
        return result;
    }
    CascadeSession session(raw, qber_hint, passes, seed);
    result.transcript = session.run();
    result.corrected.bob_bits = session.corrected_bob();
    return result;
}

double binary_entropy(double q) {
    if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("binary_entropy domain is [0, 1]");
    if (q == 0.0 || q == 1.0) return 0.0;
    return -q * std::log2(q) - (1.0 - q) * std::log2(1.0 - q);
}

SecretKey privacy_amplification(const std::vector<std::uint8_t>& bits, double qber,
                                std::uint64_t disclosed_bits, std::uint64_t security_param,
                                std::uint64_t toeplitz_seed) {
    const auto n = bits.size();
    const double capacity =
        static_cast<double>(n) * (1.0 - binary_entropy(qber)) -
        static_cast<double>(disclosed_bits) - static_cast<double>(security_param);
    const auto m = static_cast<std::int64_t>(std::floor(capacity));
    if (m <= 0) {
        std::ostringstream msg;
        msg << "key exhausted: n=" << n << " qber=" << qber << " disclosed=" << disclosed_bits
            << " s=" << security_param << " leaves " << m << " bits";
        throw KeyExhaustedError(msg.str());
    }

    // random binary Toeplitz matrix, m x n, defined by m + n - 1 seeded bits
    const std::size_t rbits = static_cast<std::size_t>(m) + n - 1;
    std::vector<std::uint8_t> r(rbits);
    Rng rng(toeplitz_seed);
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < rbits; ++i) {
        if (i % 64 == 0) word = rng.next_u64();
        r[i] = static_cast<std::uint8_t>((word >> (i % 64)) & 1u);
    }

    SecretKey key;
    key.bits.assign(static_cast<std::size_t>(m), 0);
    for (std::size_t j = 0; j < static_cast<std::size_t>(m); ++j) {
        std::uint8_t acc = 0;
        for (std::size_t i = 0; i < n; ++i) {
            acc ^= static_cast<std::uint8_t>(bits[i] & r[j + (n - 1) - i]);
        }
        key.bits[j] = acc;
    }
    key.ledger = {n, qber, disclosed_bits, security_param, static_cast<std::uint64_t>(m)};
    return key;
}

}  // namespace entlink
