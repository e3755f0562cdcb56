#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "entlink/linksim.hpp"
#include "entlink/sync.hpp"

namespace entlink {

// Basis-sifted key material of both parties. Bit map: H, +45 -> 0 and
// V, -45 -> 1, with Bob's bits flipped to undo the singlet anticorrelation.
struct RawKeyPair {
    std::vector<std::uint8_t> alice_bits;
    std::vector<std::uint8_t> bob_bits;
    std::vector<Basis> bases;
    std::vector<std::uint32_t> source_indices;  // positions in the coincidence list

    std::size_t size() const { return alice_bits.size(); }
    bool empty() const { return alice_bits.empty(); }
};

// Keeps the basis-matched coincidences (expected fraction 1/2).
RawKeyPair sift(const std::vector<CoincidencePair>& pairs);

struct QberMode {
    enum class Kind { oracle, sampled };
    Kind kind = Kind::oracle;
    double fraction = 0.1;
    std::uint64_t seed = 0;

    static QberMode oracle() { return {}; }
    static QberMode sampled(double fraction, std::uint64_t seed) {
        return {Kind::sampled, fraction, seed};
    }
};

struct QberEstimate {
    double qber = 0.0;
    std::uint64_t bits_disclosed = 0;
    std::uint64_t errors = 0;
    std::uint64_t compared = 0;
};

// Oracle mode compares every bit (simulation ground truth, no disclosure).
// Sampled mode publicly compares a random fraction and removes those bits
// from the key. Throws std::invalid_argument on an empty key.
QberEstimate estimate_qber(RawKeyPair& raw, const QberMode& mode);

struct ParityRecord {
    std::uint32_t pass = 0;   // cascade pass, or passes for the final verify
    std::uint32_t start = 0;  // block start in that pass's bit order
    std::uint32_t length = 0;
    std::uint8_t value = 0;   // the disclosed (reference-side) parity
};

struct ReconciliationTranscript {
    int passes = 0;
    std::uint64_t parity_bits_disclosed = 0;
    std::uint64_t bits_corrected = 0;
    std::vector<std::uint64_t> shuffle_seeds;
    std::vector<ParityRecord> records;
    bool converged = true;  // false flags residual errors after all passes

    // independent accounting pass over the record list
    std::uint64_t recount() const { return records.size(); }
};

struct CascadeResult {
    RawKeyPair corrected;
    ReconciliationTranscript transcript;
};

// Cascade reconciliation: pass-1 block size ceil(0.73 / qber_hint), blocks
// doubling each pass, seeded shuffles between passes, binary search on
// parity mismatches and backtracking through earlier passes after each
// correction. Alice is the reference; every parity she sends is recorded.
// Throws std::invalid_argument unless 0 < qber_hint < 0.15.
CascadeResult cascade(const RawKeyPair& raw, double qber_hint, int passes, std::uint64_t seed);

// h2(q) = -q log2 q - (1-q) log2 (1-q); throws outside [0, 1].
double binary_entropy(double q);

class KeyExhaustedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PrivacyLedger {
    std::uint64_t raw_length = 0;      // bits entering privacy amplification
    double qber = 0.0;                 // error rate used in the entropy bound
    std::uint64_t disclosed_bits = 0;  // sampling + reconciliation parities
    std::uint64_t security_param = 0;
    std::uint64_t final_length = 0;
};

struct SecretKey {
    std::vector<std::uint8_t> bits;
    PrivacyLedger ledger;
};

// Compresses the key to m = floor(n (1 - h2(q)) - disclosed - s) bits with a
// seeded random binary Toeplitz matrix; both parties obtain identical output
// from the same public seed. Throws KeyExhaustedError when m <= 0.
SecretKey privacy_amplification(const std::vector<std::uint8_t>& bits, double qber,
                                std::uint64_t disclosed_bits, std::uint64_t security_param,
                                std::uint64_t toeplitz_seed);

}  // namespace entlink
