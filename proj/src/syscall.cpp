#include "guardfs/syscall.hpp"

namespace guardfs {

FileAttr attr_from_stat(const struct ::stat& st) {
  FileAttr a;
  a.ino = st.st_ino;
  a.size = static_cast<std::uint64_t>(st.st_size);
  a.blocks = static_cast<std::uint64_t>(st.st_blocks);
  a.mode = st.st_mode;
  a.nlink = static_cast<std::uint32_t>(st.st_nlink);
  a.uid = st.st_uid;
  a.gid = st.st_gid;
  a.blksize = static_cast<std::uint32_t>(st.st_blksize);
  a.atime_ns = st.st_atim.tv_sec * 1'000'000'000LL + st.st_atim.tv_nsec;
  a.mtime_ns = st.st_mtim.tv_sec * 1'000'000'000LL + st.st_mtim.tv_nsec;
  a.ctime_ns = st.st_ctim.tv_sec * 1'000'000'000LL + st.st_ctim.tv_nsec;
  return a;
}

bool well_formed(CallKind kind, const SyscallResponse& r) {
  if (!r.ok()) return true;
  switch (kind) {
    case CallKind::Open:
    case CallKind::Create:
      return std::holds_alternative<resp::Opened>(r.result);
    case CallKind::Read:
      return std::holds_alternative<resp::Data>(r.result);
    case CallKind::Write:
      return std::holds_alternative<resp::Written>(r.result);
    case CallKind::ReadDir:
      return std::holds_alternative<resp::Entries>(r.result);
    case CallKind::GetAttr:
    case CallKind::Mkdir:
    case CallKind::Truncate:
      return std::holds_alternative<resp::Attr>(r.result);
    case CallKind::Rename:
    case CallKind::Unlink:
    case CallKind::Rmdir:
    case CallKind::Release:
      return std::holds_alternative<resp::Done>(r.result);
  }
  return false;
}

}  // namespace guardfs
