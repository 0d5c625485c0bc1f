#pragma once

#include <string>

#include "spt/config.hpp"
#include "spt/sdt.hpp"

namespace spt {

// Flat binary container: 8-byte magic, little-endian u64 header length, JSON
// header (format version, config echo, tensor directory), then the raw f64
// payload in directory order. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, SptModel& model, const RunConfig& config);

// Rebuilds attachments/placement from the embedded config echo and loads all
// values. The provided config must agree with the echo on the model, peft,
// vra and sdt sections; mismatches raise a schema error.
SptModel load_checkpoint(const std::string& path, const RunConfig& config);

// Config echo without constructing the model.
RunConfig read_checkpoint_config(const std::string& path);

}  // namespace spt
