#pragma once

// Internal: network body serialisation shared by checkpoints and train-state
// snapshots. Layout is part of the checkpoint format documented in nets.hpp.

#include "acal/nets.hpp"
#include "binio.hpp"

namespace acal::net_io {

void write_network(binio::ByteWriter& w, const Network& net);
Network read_network(binio::ByteReader& r);

}  // namespace acal::net_io
