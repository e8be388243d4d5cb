#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <type_traits>

#include "threadcomm/threadcomm.hpp"

namespace threadcomm {

/// Message: dissemination over zero-byte point-to-point messages.
/// Atomic: the same rounds over shared flags; across processes it becomes
/// local rounds, then message rounds between one thread per process, then
/// local rounds again.
enum class BarrierVariant { Message, Atomic };

enum class ReduceKind { Sum, Min, Max };
enum class ElemType { Int32, Int64, Float64 };

struct ReduceOp {
  ReduceKind kind = ReduceKind::Sum;
  ElemType elem = ElemType::Int32;
};

std::size_t element_size(ElemType t) noexcept;

/// All collectives must be called by every rank, in the same order.
void barrier(Threadcomm& comm, BarrierVariant variant = BarrierVariant::Message);

/// Binomial tree rooted at `root`; `buf` has the same length on every rank.
void bcast(Threadcomm& comm, std::span<std::byte> buf, int root);

/// Binomial-tree reduction of `count` elements into `recvbuf` on `root`.
/// `recvbuf` is ignored on other ranks and may be empty there.
void reduce(Threadcomm& comm, std::span<const std::byte> sendbuf, std::span<std::byte> recvbuf, std::size_t count,
            ReduceOp op, int root);

/// Reduce to rank 0 followed by a broadcast.
void allreduce(Threadcomm& comm, std::span<const std::byte> sendbuf, std::span<std::byte> recvbuf,
               std::size_t count, ReduceOp op);

template <class T>
struct elem_type_of;
template <>
struct elem_type_of<std::int32_t> : std::integral_constant<ElemType, ElemType::Int32> {};
template <>
struct elem_type_of<std::int64_t> : std::integral_constant<ElemType, ElemType::Int64> {};
template <>
struct elem_type_of<double> : std::integral_constant<ElemType, ElemType::Float64> {};

template <class T>
concept Reducible = requires { elem_type_of<T>::value; };

template <Reducible T>
void reduce(Threadcomm& comm, std::span<const T> sendbuf, std::span<T> recvbuf, ReduceKind kind, int root) {
  reduce(comm, std::as_bytes(sendbuf), std::as_writable_bytes(recvbuf), sendbuf.size(),
         {kind, elem_type_of<T>::value}, root);
}

template <Reducible T>
void allreduce(Threadcomm& comm, std::span<const T> sendbuf, std::span<T> recvbuf, ReduceKind kind) {
  allreduce(comm, std::as_bytes(sendbuf), std::as_writable_bytes(recvbuf), sendbuf.size(),
            {kind, elem_type_of<T>::value});
}

/// Elementwise `acc[i] = acc[i] op in[i]` over `count` elements.
void combine(std::span<std::byte> acc, std::span<const std::byte> in, std::size_t count, ReduceOp op);

}  // namespace threadcomm
