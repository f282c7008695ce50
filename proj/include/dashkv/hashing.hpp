// Copyright 2026 the dashkv authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Packed {-1,+1} codes and the XOR/popcount kernels that stand in for
// floating-point similarity.
//
// Bit layout: code position p lives in word p / 64, bit p % 64 (least
// significant bit first). A set bit is +1, a clear bit is -1. Bits past
// length_bits in the last word are always zero.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "dashkv/numerics.hpp"

namespace dashkv {

using Word = std::uint64_t;
constexpr std::size_t kWordBits = 64;

constexpr std::size_t words_for_bits(std::size_t bits) {
  return (bits + kWordBits - 1) / kWordBits;
}

/// Non-owning view of one packed code.
struct BitCodeView {
  std::size_t length_bits = 0;
  std::span<const Word> words;
};

class BitCode {
 public:
  BitCode() = default;
  /// All-(-1) code of the given length.
  explicit BitCode(std::size_t length_bits);
  BitCode(std::size_t length_bits, std::vector<Word> words);

  std::size_t length_bits() const noexcept { return length_bits_; }
  std::span<const Word> words() const noexcept { return words_; }
  BitCodeView view() const noexcept { return {length_bits_, words_}; }
  operator BitCodeView() const noexcept { return view(); }  // NOLINT

  bool bit(std::size_t pos) const;
  void set_bit(std::size_t pos, bool value);
  BitCode complement() const;

  friend bool operator==(const BitCode&, const BitCode&) = default;

 private:
  std::size_t length_bits_ = 0;
  std::vector<Word> words_;
};

/// Append-only contiguous storage of equal-length codes: the binary half
/// of the KV cache.
class CodeBank {
 public:
  explicit CodeBank(std::size_t length_bits = 0);

  std::size_t length_bits() const noexcept { return length_bits_; }
  std::size_t words_per_code() const noexcept { return words_per_code_; }
  std::size_t size() const noexcept { return count_; }
  bool empty() const noexcept { return count_ == 0; }

  void append(BitCodeView code);
  void reserve(std::size_t count) { words_.reserve(count * words_per_code_); }
  BitCodeView operator[](std::size_t i) const;
  std::span<const Word> raw_words() const noexcept { return words_; }

  friend bool operator==(const CodeBank&, const CodeBank&) = default;

 private:
  std::size_t length_bits_;
  std::size_t words_per_code_;
  std::size_t count_ = 0;
  std::vector<Word> words_;
};

/// Bit i is set iff v[i] >= 0 (sign(0) is +1).
BitCode sign_binarize(std::span<const double> v);

/// Expand to a vector of +1.0 / -1.0.
Vec unpack(BitCodeView code);

std::size_t hamming(BitCodeView a, BitCodeView b);

/// Exact +-1 inner product from a Hamming distance: l - 2h.
long inner_from_hamming(std::size_t length_bits, std::size_t h);

/// D_raw: Hamming distance from q to every code in the bank.
std::vector<std::uint32_t> batch_hamming(BitCodeView q, const CodeBank& bank);

/// Same as batch_hamming but restricted to the first `count` codes and
/// writing into caller-owned storage.
void batch_hamming_into(BitCodeView q, const CodeBank& bank, std::size_t count,
                        std::span<std::uint32_t> out);

// "DKVC" | u16 version | u32 length_bits | u64 count | packed words (LE u64)
constexpr std::uint16_t kCodeBankVersion = 1;
void write_code_bank(std::ostream& out, const CodeBank& bank);
CodeBank read_code_bank(std::istream& in);

}  // namespace dashkv
