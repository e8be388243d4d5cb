#pragma once

#include <atomic>

namespace threadcomm {

/// Intrusive link for MpscQueue. A node may sit in at most one queue.
struct MpscNode {
  std::atomic<MpscNode*> next{nullptr};
};

/// Lock-free multiple-producer single-consumer queue.
///
/// Producers swing the head with an exchange and then link the previous node,
/// so push is wait-free. The consumer walks from the tail and uses a stub node
/// to detach the last element. Between a producer's exchange and its link
/// store the queue looks empty to the consumer; pop() returns nullptr and the
/// element shows up on a later call.
///
/// push() publishes with release and pop() reads with acquire, so writes made
/// to a node before it is pushed are visible to the consumer that pops it.
template <class T>
class MpscQueue {
  static_assert(std::is_base_of_v<MpscNode, T>, "T must derive from MpscNode");

 public:
  MpscQueue() noexcept : head_(&stub_), tail_(&stub_) {}
  MpscQueue(const MpscQueue&) = delete;
  MpscQueue& operator=(const MpscQueue&) = delete;

  /// Any thread.
  void push(T* item) noexcept { push_node(static_cast<MpscNode*>(item)); }

  /// Owner thread only.
  T* pop() noexcept {
    MpscNode* tail = tail_;
    MpscNode* next = tail->next.load(std::memory_order_acquire);
    if (tail == &stub_) {
      if (next == nullptr) return nullptr;
      tail_ = next;
      tail = next;
      next = next->next.load(std::memory_order_acquire);
    }
    if (next != nullptr) {
      tail_ = next;
      return static_cast<T*>(tail);
    }
    if (tail != head_.load(std::memory_order_acquire)) {
      // A producer is between its exchange and its link store.
      return nullptr;
    }
    push_node(&stub_);
    next = tail->next.load(std::memory_order_acquire);
    if (next != nullptr) {
      tail_ = next;
      return static_cast<T*>(tail);
    }
    return nullptr;
  }

  /// Owner thread only; approximate while producers are active.
  bool empty() const noexcept {
    const MpscNode* tail = tail_;
    return tail == &stub_ && tail->next.load(std::memory_order_acquire) == nullptr &&
           head_.load(std::memory_order_acquire) == &stub_;
  }

 private:
  void push_node(MpscNode* n) noexcept {
    n->next.store(nullptr, std::memory_order_relaxed);
    MpscNode* prev = head_.exchange(n, std::memory_order_acq_rel);
    prev->next.store(n, std::memory_order_release);
  }

  alignas(64) std::atomic<MpscNode*> head_;
  alignas(64) MpscNode* tail_;
  MpscNode stub_;
};

}  // namespace threadcomm
