#pragma once

#include <set>
#include <string>
#include <vector>

#include "sdl/tape.hpp"

namespace sdl {

// Named parameter registry shared by the encoder, decoder, heads and
// dictionary. Names are dot-paths ("encoder.block0.spatial.wq"); prefixes
// drive the checkpoint layout and the inference access trace.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  int add(std::string name, Tensor value) {
    require(find(name) < 0, Err::InvalidConfig, "duplicate parameter name " + name);
    entries_.push_back({std::move(name), std::move(value)});
    return static_cast<int>(entries_.size()) - 1;
  }

  int find(const std::string& name) const {
    for (size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  Entry& entry(int id) { return entries_.at(static_cast<size_t>(id)); }
  const Entry& entry(int id) const { return entries_.at(static_cast<size_t>(id)); }
  size_t size() const { return entries_.size(); }

  int64_t count_with_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) n += e.value.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
};

// Per-forward-pass binding of parameters onto a tape. Each parameter becomes
// a trainable leaf on first use; every access is recorded so inference can
// prove it never touched training-only parameters.
class ParamCtx {
 public:
  ParamCtx(Tape& tape, ParamStore& store) : tape_(tape), store_(store) {
    leaves_.assign(store.size(), Tensor());
    bound_.assign(store.size(), 0);
  }

  Tape& tape() { return tape_; }

  Tensor operator()(int id) {
    auto idx = static_cast<size_t>(id);
    if (!bound_[idx]) {
      accessed_.insert(store_.entry(id).name);
      leaves_[idx] = tape_.leaf(store_.entry(id).value, true);
      bound_[idx] = 1;
    }
    return leaves_[idx];
  }

  // tape node of a bound parameter, -1 if unused this pass
  int node_of(int id) const {
    auto idx = static_cast<size_t>(id);
    return bound_[idx] ? leaves_[idx].node : -1;
  }

  const std::set<std::string>& accessed() const { return accessed_; }

 private:
  Tape& tape_;
  ParamStore& store_;
  std::vector<Tensor> leaves_;
  std::vector<char> bound_;
  std::set<std::string> accessed_;
};

}  // namespace sdl
