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

#include "dashkv/hashing.hpp"

#include <algorithm>
#include <bit>
#include <istream>
#include <ostream>
#include <string>

#include "dashkv/binary_io.hpp"
#include "dashkv/errors.hpp"

namespace dashkv {

namespace {

Word tail_mask(std::size_t length_bits) {
  const std::size_t r = length_bits % kWordBits;
  return r == 0 ? ~Word{0} : (Word{1} << r) - 1;
}

void check_padding(std::size_t length_bits, std::span<const Word> words) {
  if (words.size() != words_for_bits(length_bits)) {
    throw DimensionError("BitCode: word count does not match length");
  }
  if (!words.empty() && (words.back() & ~tail_mask(length_bits)) != 0) {
    throw ContractViolation("BitCode: padding bits are not zero");
  }
}

}  // namespace

BitCode::BitCode(std::size_t length_bits)
    : length_bits_(length_bits), words_(words_for_bits(length_bits), 0) {}

BitCode::BitCode(std::size_t length_bits, std::vector<Word> words)
    : length_bits_(length_bits), words_(std::move(words)) {
  check_padding(length_bits_, words_);
}

bool BitCode::bit(std::size_t pos) const {
  if (pos >= length_bits_) throw DomainError("BitCode::bit out of range");
  return (words_[pos / kWordBits] >> (pos % kWordBits)) & 1u;
}

void BitCode::set_bit(std::size_t pos, bool value) {
  if (pos >= length_bits_) throw DomainError("BitCode::set_bit out of range");
  const Word mask = Word{1} << (pos % kWordBits);
  if (value) {
    words_[pos / kWordBits] |= mask;
  } else {
    words_[pos / kWordBits] &= ~mask;
  }
}

BitCode BitCode::complement() const {
  BitCode out = *this;
  for (Word& w : out.words_) w = ~w;
  if (!out.words_.empty()) out.words_.back() &= tail_mask(length_bits_);
  return out;
}

CodeBank::CodeBank(std::size_t length_bits)
    : length_bits_(length_bits), words_per_code_(words_for_bits(length_bits)) {}

void CodeBank::append(BitCodeView code) {
  require_same_length(code.length_bits, length_bits_, "CodeBank::append");
  check_padding(code.length_bits, code.words);
  words_.insert(words_.end(), code.words.begin(), code.words.end());
  ++count_;
}

BitCodeView CodeBank::operator[](std::size_t i) const {
  if (i >= count_) throw DomainError("CodeBank index out of range");
  return {length_bits_, std::span<const Word>(words_).subspan(
                            i * words_per_code_, words_per_code_)};
}

BitCode sign_binarize(std::span<const double> v) {
  if (v.empty()) throw DimensionError("sign_binarize: empty vector");
  std::vector<Word> words(words_for_bits(v.size()), 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] >= 0.0) words[i / kWordBits] |= Word{1} << (i % kWordBits);
  }
  return BitCode(v.size(), std::move(words));
}

Vec unpack(BitCodeView code) {
  Vec out(code.length_bits);
  for (std::size_t i = 0; i < code.length_bits; ++i) {
    out[i] = ((code.words[i / kWordBits] >> (i % kWordBits)) & 1u) ? 1.0 : -1.0;
  }
  return out;
}

std::size_t hamming(BitCodeView a, BitCodeView b) {
  require_same_length(a.length_bits, b.length_bits, "hamming");
  std::size_t h = 0;
  for (std::size_t w = 0; w < a.words.size(); ++w) {
    h += static_cast<std::size_t>(std::popcount(a.words[w] ^ b.words[w]));
  }
  return h;
}

long inner_from_hamming(std::size_t length_bits, std::size_t h) {
  if (h > length_bits) {
    throw DomainError("inner_from_hamming: h=" + std::to_string(h) +
                      " exceeds l=" + std::to_string(length_bits));
  }
  return static_cast<long>(length_bits) - 2 * static_cast<long>(h);
}

void batch_hamming_into(BitCodeView q, const CodeBank& bank, std::size_t count,
                        std::span<std::uint32_t> out) {
  require_same_length(q.length_bits, bank.length_bits(), "batch_hamming");
  if (count > bank.size()) throw DomainError("batch_hamming: count > bank size");
  require_same_length(out.size(), count, "batch_hamming output");

  const Word* codes = bank.raw_words().data();
  const std::size_t wpc = bank.words_per_code();
  switch (wpc) {
    case 1: {
      const Word q0 = q.words[0];
      for (std::size_t i = 0; i < count; ++i) {
        out[i] = static_cast<std::uint32_t>(std::popcount(q0 ^ codes[i]));
      }
      break;
    }
    case 2: {
      const Word q0 = q.words[0];
      const Word q1 = q.words[1];
      for (std::size_t i = 0; i < count; ++i) {
        const Word* c = codes + 2 * i;
        out[i] = static_cast<std::uint32_t>(std::popcount(q0 ^ c[0]) +
                                            std::popcount(q1 ^ c[1]));
      }
      break;
    }
    default:
      for (std::size_t i = 0; i < count; ++i) {
        const Word* c = codes + wpc * i;
        std::uint32_t h = 0;
        for (std::size_t w = 0; w < wpc; ++w) {
          h += static_cast<std::uint32_t>(std::popcount(q.words[w] ^ c[w]));
        }
        out[i] = h;
      }
  }
}

std::vector<std::uint32_t> batch_hamming(BitCodeView q, const CodeBank& bank) {
  std::vector<std::uint32_t> out(bank.size());
  batch_hamming_into(q, bank, bank.size(), out);
  return out;
}

void write_code_bank(std::ostream& out, const CodeBank& bank) {
  binary::write_magic(out, "DKVC");
  binary::write_le<std::uint16_t>(out, kCodeBankVersion);
  binary::write_le<std::uint32_t>(out,
                                  static_cast<std::uint32_t>(bank.length_bits()));
  binary::write_le<std::uint64_t>(out, bank.size());
  for (Word w : bank.raw_words()) binary::write_le<std::uint64_t>(out, w);
}

CodeBank read_code_bank(std::istream& in) {
  binary::expect_magic(in, "DKVC");
  const auto version = binary::read_le<std::uint16_t>(in);
  if (version != kCodeBankVersion) {
    throw FormatError("DKVC: unsupported version " + std::to_string(version));
  }
  const auto length_bits = binary::read_le<std::uint32_t>(in);
  const auto count = binary::read_le<std::uint64_t>(in);
  CodeBank bank(length_bits);
  // The count is untrusted until the words are actually read.
  bank.reserve(std::min<std::uint64_t>(count, 1u << 20));
  std::vector<Word> words(bank.words_per_code());
  for (std::uint64_t i = 0; i < count; ++i) {
    for (Word& w : words) w = binary::read_le<std::uint64_t>(in);
    try {
      bank.append({length_bits, words});
    } catch (const ContractViolation&) {
      throw FormatError("DKVC: dirty padding bits in code " + std::to_string(i));
    }
  }
  return bank;
}

}  // namespace dashkv
