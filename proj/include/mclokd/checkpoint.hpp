#pragma once

// Binary checkpoint container.
//
//   offset  size  field
//   0       8     magic "MCLOKDCK"
//   8       4     format version (u32, little-endian), currently 1
//   12      4     kind (u32): 1 = training state, 2 = deployment network
//   16      8     payload length L (u64)
//   24      L     payload
//   24+L    4     CRC-32 of the payload (u32)
//
// Payload fields are length-prefixed: strings as u64 length + bytes, double
// arrays as u64 count + IEEE-754 doubles, integers as u64. A training-state
// payload holds the config snapshot (JSON), epoch, step, three RNG states,
// every graph parameter in PeerGraph::parameters() order, the SGD velocity,
// and each memory bank (N, d, rho, z, rows, labels). A deployment payload
// holds the config snapshot and the single-peer graph's parameters.

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "mclokd/config.hpp"
#include "mclokd/peer_graph.hpp"
#include "mclokd/trainer.hpp"

namespace mclokd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { kTrainState = 1, kDeployment = 2 };

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);

/// Throws IntegrityError on a bad magic/version/checksum or a truncated
/// payload (nothing is returned in that case), and IncompatibleCheckpoint when
/// `expected` is given and any structural key differs.
TrainState restore_checkpoint(const std::filesystem::path& path, const TrainConfig* expected = nullptr);

/// Writes `path` plus a structure description next to it (same stem, .json).
void save_deployment(const PeerGraph& deployment, const TrainConfig& config, const std::filesystem::path& path);

struct DeploymentArtifact {
    TrainConfig config;
    PeerGraph graph;
};
DeploymentArtifact load_deployment(const std::filesystem::path& path);

/// Kind stored in the header (after full integrity validation).
CheckpointKind checkpoint_kind(const std::filesystem::path& path);

/// Human-readable structure of a graph: input shape, stages, branch point,
/// heads and parameter counts.
nlohmann::json describe_structure(const PeerGraph& graph);

}  // namespace mclokd
