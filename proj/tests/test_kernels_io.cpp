#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <random>

#include "metaforge/kernels.hpp"
#include "metaforge/propagate.hpp"
#include "metaforge/runconfig.hpp"
#include "metaforge/tensorio.hpp"
#include "oracles.hpp"

using namespace metaforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("metaforge_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string npy_bytes(const std::string& dict, std::size_t payload_bytes) {
  std::string header = dict;
  while ((10 + header.size() + 1) % 64 != 0) header.push_back(' ');
  header.push_back('\n');
  std::string out = "\x93NUMPY";
  out.push_back('\x01');
  out.push_back('\x00');
  out.push_back(static_cast<char>(header.size() & 0xff));
  out.push_back(static_cast<char>(header.size() >> 8));
  out += header;
  out += std::string(payload_bytes, '\0');
  return out;
}

}  // namespace

// ---------------------------------------------------------------- split / plan / embed

TEST(SplitSigned, Definition) {
  const auto p = split_signed({RealMatrix(1, 3, {1, -2, 3}), Color::mono, 1.0});
  EXPECT_EQ(p.plus, RealMatrix(1, 3, {1, 0, 3}));
  EXPECT_EQ(p.minus, RealMatrix(1, 3, {0, 2, 0}));
}

TEST(SplitSigned, NonNegativeKernelHasEmptyMinus) {
  std::mt19937_64 rng(1);
  const auto p = split_signed({oracle::random_real(5, 5, rng), Color::mono, 1.0});
  EXPECT_EQ(sum(p.minus), 0.0);
}

TEST(SplitSigned, ReconstructsExactlyWithDisjointSupport) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const RealMatrix k = oracle::random_real(7, 7, rng, -3, 3);
    const auto p = split_signed({k, Color::mono, 1.0});
    for (std::size_t i = 0; i < k.size(); ++i) {
      EXPECT_EQ(p.plus[i] - p.minus[i], k[i]);
      EXPECT_TRUE(p.plus[i] == 0.0 || p.minus[i] == 0.0);
      EXPECT_GE(p.plus[i], 0.0);
      EXPECT_GE(p.minus[i], 0.0);
    }
  }
}

TEST(SplitSigned, NonFiniteRejected) {
  RealMatrix k(3, 3, 0.0);
  k[4] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(split_signed({k, Color::mono, 1.0}), ValidationError);
}

TEST(PlanArray, ElementCounts) {
  EXPECT_EQ(plan_array(64, ColorMode::rgb_signed).elements.size(), 384u);
  EXPECT_EQ(plan_array(1, ColorMode::mono_signed).elements.size(), 2u);
  EXPECT_EQ(plan_array(10, ColorMode::rgb_signed).elements.size(), 60u);
  EXPECT_THROW(plan_array(0, ColorMode::rgb_signed), ValidationError);
}

TEST(PlanArray, OrderingIsChannelColorSign) {
  const auto plan = plan_array(2, ColorMode::rgb_signed);
  for (std::size_t i = 0; i < plan.elements.size(); ++i) {
    const auto& e = plan.elements[i];
    EXPECT_EQ(e.index, i);
    const std::size_t slot = e.color == Color::R ? 0 : e.color == Color::G ? 1 : 2;
    EXPECT_EQ(plan_element_index(e.channel, slot, 3, e.sign), i);
  }
  EXPECT_EQ(plan.elements[5].channel, 0u);
  EXPECT_EQ(plan.elements[5].color, Color::B);
  EXPECT_EQ(plan.elements[5].sign, Sign::minus);
  EXPECT_EQ(plan.elements[6].channel, 1u);
  EXPECT_EQ(plan.elements[6].sign, Sign::plus);
}

TEST(PlanArray, JsonRoundTripPreservesOrder) {
  const auto plan = plan_array(5, ColorMode::rgb_signed);
  const auto back = plan_from_json(nlohmann::json::parse(plan_to_json(plan).dump()));
  ASSERT_EQ(back.elements.size(), plan.elements.size());
  EXPECT_EQ(back.output_channels, 5u);
  for (std::size_t i = 0; i < plan.elements.size(); ++i) {
    EXPECT_EQ(back.elements[i].index, plan.elements[i].index);
    EXPECT_EQ(back.elements[i].channel, plan.elements[i].channel);
    EXPECT_EQ(back.elements[i].color, plan.elements[i].color);
    EXPECT_EQ(back.elements[i].sign, plan.elements[i].sign);
  }
  EXPECT_THROW(plan_from_json(nlohmann::json{{"color_mode", "mono-signed"}}), ValidationError);
}

TEST(EmbedTarget, DeltaLandsOnAxis) {
  const SensorGrid s{32, 32, 1e-6};
  const auto t = embed_target(oracle::delta_kernel(5), s, 1);
  EXPECT_EQ(t.values(16, 16), 1.0);
  EXPECT_EQ(sum(t.values), 1.0);
  EXPECT_EQ(t.footprint.row0, 14u);
  EXPECT_EQ(t.footprint.rows, 5u);
}

TEST(EmbedTarget, PreservesMassAtAnySampling) {
  std::mt19937_64 rng(3);
  const SensorGrid s{64, 64, 1e-6};
  for (std::size_t spt : {1, 2, 3, 5}) {
    const RealMatrix half = oracle::random_real(7, 7, rng);
    const auto t = embed_target(half, s, spt);
    EXPECT_NEAR(sum(t.values), sum(half), 1e-12 * sum(half));
    for (std::size_t r = 0; r < 64; ++r)
      for (std::size_t c = 0; c < 64; ++c) {
        const bool inside = r >= t.footprint.row0 && r < t.footprint.row0 + t.footprint.rows &&
                            c >= t.footprint.col0 && c < t.footprint.col0 + t.footprint.cols;
        if (!inside) EXPECT_EQ(t.values(r, c), 0.0);
      }
  }
}

TEST(EmbedTarget, OnesExpandToQuarterBlocks) {
  const auto t = embed_target(RealMatrix(3, 3, 1.0), SensorGrid{16, 16, 1e-6}, 2);
  EXPECT_EQ(t.footprint.rows, 6u);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(t.values(t.footprint.row0 + r, t.footprint.col0 + c), 0.25);
  EXPECT_EQ(sum(t.values), 9.0);
}

TEST(EmbedTarget, OversizedFootprintIsBoundsError) {
  EXPECT_THROW(embed_target(RealMatrix(5, 5, 1.0), SensorGrid{8, 8, 1e-6}, 2), BoundsError);
  EXPECT_THROW(embed_target(RealMatrix(3, 3, -1.0), SensorGrid{8, 8, 1e-6}, 1), ValidationError);
}

TEST(ImportFirstLayer, ReferenceShape) {
  const Tensor w({64, 3, 7, 7}, std::vector<double>(64 * 3 * 49, 0.5));
  const auto ks = import_first_layer(w, 1e-6);
  EXPECT_EQ(ks.size(), 192u);
  std::size_t halves = 0;
  for (const auto& k : ks) {
    split_signed(k);
    halves += 2;
  }
  EXPECT_EQ(halves, 384u);
  EXPECT_EQ(ks[4].channel, Color::G);
}

TEST(ImportFirstLayer, DeltaHasNoNegativeHalf) {
  const Tensor w({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  const auto ks = import_first_layer(w, 1e-6);
  ASSERT_EQ(ks.size(), 1u);
  EXPECT_EQ(sum(split_signed(ks[0]).minus), 0.0);
}

TEST(ImportFirstLayer, FlipsCorrelationWeights) {
  std::vector<double> d(9);
  for (int i = 0; i < 9; ++i) d[i] = i;
  const auto ks = import_first_layer(Tensor({1, 1, 3, 3}, d), 1e-6);
  EXPECT_EQ(ks[0].taps(0, 0), 8.0);
  EXPECT_EQ(ks[0].taps(2, 2), 0.0);
  EXPECT_EQ(ks[0].taps(0, 2), 6.0);
}

TEST(ImportFirstLayer, RoundTrip) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::vector<double> d(4 * 3 * 5 * 5);
  for (auto& v : d) v = n(rng);
  const Tensor w({4, 3, 5, 5}, d);
  const Tensor back = export_first_layer(import_first_layer(w, 1e-6), 3);
  EXPECT_EQ(back.shape, w.shape);
  EXPECT_EQ(back.data, w.data);
}

TEST(ImportFirstLayer, RejectsUnsupportedShapes) {
  EXPECT_THROW(import_first_layer(Tensor({1, 1, 4, 4}, std::vector<double>(16)), 1e-6), ValidationError);
  EXPECT_THROW(import_first_layer(Tensor({1, 2, 3, 3}, std::vector<double>(18)), 1e-6), ValidationError);
  EXPECT_THROW(import_first_layer(Tensor({1, 1, 3, 5}, std::vector<double>(15)), 1e-6), ValidationError);
  EXPECT_THROW(import_first_layer(Tensor({3, 3}, std::vector<double>(9)), 1e-6), ValidationError);
}

// ---------------------------------------------------------------- NPY

TEST(Npy, RoundTripIsBitIdentical) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  std::vector<double> d(12);
  for (auto& v : d) v = n(rng);
  d[3] = -0.0;
  d[7] = std::numeric_limits<double>::denorm_min();
  const Tensor t({3, 4}, d);
  const auto dir = scratch_dir("npy_roundtrip");
  io::save_tensor(t, dir / "t.npy");
  const Tensor back = io::load_tensor(dir / "t.npy");
  EXPECT_EQ(back.shape, t.shape);
  ASSERT_EQ(back.data.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(back.data[i]), std::bit_cast<std::uint64_t>(d[i]));
}

TEST(Npy, HandBuiltHeaderParses) {
  std::string bytes = npy_bytes("{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }", 48);
  const double one = 1.0;
  std::memcpy(bytes.data() + bytes.size() - 8, &one, 8);
  const Tensor t = io::decode_npy(bytes);
  EXPECT_EQ(t.shape, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(t.dtype, Dtype::f64);
  EXPECT_EQ(t.data[5], 1.0);
}

TEST(Npy, EncodedHeaderIsAlignedAndLittleEndian) {
  const std::string bytes = io::encode_npy(Tensor({2}, {1.0, -2.0}));
  EXPECT_EQ(bytes.substr(0, 6), "\x93NUMPY");
  const std::size_t hlen = static_cast<unsigned char>(bytes[8]) | static_cast<unsigned char>(bytes[9]) << 8;
  EXPECT_EQ((10 + hlen) % 64, 0u);
  EXPECT_NE(bytes.find("'shape': (2,)"), std::string::npos);
  // 1.0 = 0x3FF0000000000000, least significant byte first
  EXPECT_EQ(static_cast<unsigned char>(bytes[10 + hlen + 7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[10 + hlen]), 0x00);
}

TEST(Npy, Float32ReadsAndWrites) {
  std::string bytes = npy_bytes("{'descr': '<f4', 'fortran_order': False, 'shape': (2,), }", 8);
  const float v[2] = {1.5f, -0.25f};
  std::memcpy(bytes.data() + bytes.size() - 8, v, 8);
  const Tensor t = io::decode_npy(bytes);
  EXPECT_EQ(t.dtype, Dtype::f32);
  EXPECT_EQ(t.data, (std::vector<double>{1.5, -0.25}));
  EXPECT_EQ(io::decode_npy(io::encode_npy(t)).data, t.data);
}

TEST(Npy, TruncatedPayloadNamesByteCounts) {
  const std::string bytes = npy_bytes("{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }", 40);
  try {
    io::decode_npy(bytes);
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 48 bytes, got 40"), std::string::npos) << e.what();
  }
}

TEST(Npy, RejectsBadInputs) {
  EXPECT_THROW(io::decode_npy("not an npy file at all"), ValidationError);
  EXPECT_THROW(io::decode_npy(npy_bytes("{'descr': '<f8', 'fortran_order': True, 'shape': (2,), }", 16)),
               ValidationError);
  EXPECT_THROW(io::decode_npy(npy_bytes("{'descr': '<i4', 'fortran_order': False, 'shape': (2,), }", 8)),
               ValidationError);
  EXPECT_THROW(io::decode_npy(npy_bytes("{'descr': '|O', 'fortran_order': False, 'shape': (2,), }", 16)),
               ValidationError);
  EXPECT_THROW(io::decode_npy(npy_bytes("{'descr': '>f8', 'fortran_order': False, 'shape': (2,), }", 16)),
               ValidationError);
}

TEST(Npy, MissingFileIsIoError) {
  EXPECT_THROW(io::load_tensor("/nonexistent/dir/x.npy"), IoError);
}

TEST(Npy, ScalarAndEmptyShapes) {
  const Tensor s({}, {3.0});
  EXPECT_EQ(io::decode_npy(io::encode_npy(s)).data, s.data);
  const Tensor e({0, 4}, {});
  EXPECT_EQ(io::decode_npy(io::encode_npy(e)).shape, e.shape);
}

// ---------------------------------------------------------------- images / csv

TEST(Images, PgmDecodeAppliesGamma) {
  std::string pgm = "P5\n# comment\n2 1\n255\n";
  pgm.push_back(static_cast<char>(255));
  pgm.push_back(static_cast<char>(128));
  const auto img = io::decode_pnm(pgm);
  ASSERT_EQ(img.channels.size(), 1u);
  EXPECT_EQ(img.channels[0](0, 0), 1.0);
  EXPECT_NEAR(img.channels[0](0, 1), std::pow(128.0 / 255.0, 2.2), 1e-15);
}

TEST(Images, PpmHasThreeChannels) {
  std::string ppm = "P6 1 1 65535\n";
  for (int i = 0; i < 3; ++i) {
    ppm.push_back(static_cast<char>(0xff));
    ppm.push_back(static_cast<char>(0xff));
  }
  const auto img = io::decode_pnm(ppm);
  ASSERT_EQ(img.channels.size(), 3u);
  EXPECT_EQ(img.channels[2](0, 0), 1.0);
  EXPECT_THROW(io::decode_pnm("P3 1 1 255 0 0 0"), ValidationError);
  EXPECT_THROW(io::decode_pnm("P5 4 4 255\n\x01"), ValidationError);
}

TEST(Images, PreviewIsMaxNormalized) {
  const std::string pgm = io::encode_pgm_preview(RealMatrix(1, 2, {0.5, 2.0}));
  EXPECT_EQ(pgm.substr(0, 11), "P5\n2 1\n255\n");
  EXPECT_EQ(static_cast<unsigned char>(pgm[11]), 64);
  EXPECT_EQ(static_cast<unsigned char>(pgm[12]), 255);
  const std::string pfm = io::encode_pfm(RealMatrix(1, 1, {1.0}));
  EXPECT_EQ(pfm.substr(0, 12), "Pf\n1 1\n-1.0\n");
  EXPECT_EQ(pfm.size(), 16u);
}

TEST(Csv, RaggedColumns) {
  EXPECT_EQ(io::encode_csv({"a", "b"}, {{1, 2}, {3}}), "a,b\n1,3\n2,\n");
}

TEST(AtomicWrite, CreatesParentsAndLeavesNoTemp) {
  const auto dir = scratch_dir("atomic");
  io::write_file_atomic(dir / "a" / "b" / "x.txt", "hello");
  EXPECT_EQ(io::read_file(dir / "a" / "b" / "x.txt"), "hello");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir / "a" / "b")) ++files;
  EXPECT_EQ(files, 1u);
}

// ---------------------------------------------------------------- config

TEST(Config, EmptyObjectGivesDefaults) {
  const RunConfig c = parse_config(nlohmann::json::object());
  EXPECT_EQ(c.grid_n, 128u);
  EXPECT_EQ(c.optics.wavelength_m, 532e-9);
  EXPECT_EQ(c.optics.sensor_distance_m, 10e-3);
  EXPECT_EQ(c.dko.max_iters, 2000u);
  EXPECT_EQ(c.dko.lr, 0.02);
  EXPECT_EQ(c.dko.patience, 50u);
  EXPECT_EQ(c.dko.optimizer, OptimizerKind::adam);
  EXPECT_FALSE(c.aperture_diameter_m);
}

TEST(Config, FullScaleEchoesVerbatim) {
  const auto j = nlohmann::json::parse(R"({"grid_n": 1025, "pitch_m": 2.5e-6, "sensor_distance_m": 0.01})");
  const auto dir = scratch_dir("config");
  io::write_json(j, dir / "full.json");
  const RunConfig c = load_config(dir / "full.json");
  EXPECT_EQ(c.grid_n, 1025u);
  EXPECT_EQ(c.pitch_m, 2.5e-6);
  EXPECT_EQ(c.optics.sensor_distance_m, 0.01);
  const auto echo = config_to_json(c);
  for (const auto& [k, v] : j.items()) EXPECT_EQ(echo.at(k), v) << k;
  EXPECT_EQ(echo.at("format_version"), io::kFormatVersion);
  // the echo reloads to the same effective config
  EXPECT_EQ(config_to_json(parse_config(echo)), echo);
}

TEST(Config, TypeErrorNamesJsonPath) {
  try {
    parse_config(nlohmann::json::parse(R"({"wavelength_m": "green"})"));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("type error at $.wavelength_m"), std::string::npos) << e.what();
  }
}

TEST(Config, UnknownKeysRejectedAtAnyDepth) {
  try {
    parse_config(nlohmann::json::parse(R"({"dko": {"lr": 0.1, "momentum": 0.9}})"));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("$.dko.momentum"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"wavelength": 5e-7})")), ValidationError);
}

TEST(Config, ValueErrors) {
  EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"grid_n": -3})")), ValidationError);
  EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"pitch_m": 0})")), ValidationError);
  EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"format_version": 2})")), ValidationError);
  EXPECT_THROW(parse_config(nlohmann::json::parse(R"({"dko": {"optimizer": "sgd"}})")), ValidationError);
  EXPECT_THROW(parse_config(nlohmann::json::parse(R"([1, 2])")), ValidationError);
}

TEST(Config, InvalidJsonIsValidationError) {
  const auto dir = scratch_dir("badjson");
  io::write_file_atomic(dir / "bad.json", "{ nope");
  EXPECT_THROW(load_config(dir / "bad.json"), ValidationError);
  EXPECT_THROW(load_config(dir / "missing.json"), IoError);
}

TEST(Config, SeedFlowsIntoModules) {
  const RunConfig c = parse_config(nlohmann::json::parse(R"({"seed": 17, "samples_per_tap": 2})"));
  EXPECT_EQ(c.dko.seed, 17u);
  EXPECT_EQ(c.capture.seed, 17u);
  EXPECT_EQ(c.capture.samples_per_tap, 2u);
}

TEST(Config, ShippedConfigsLoad) {
  const fs::path dir = METAFORGE_SOURCE_DIR "/configs";
  const RunConfig desk = load_config(dir / "desk.json");
  const RunConfig full = load_config(dir / "full.json");
  EXPECT_EQ(desk.grid_n, 128u);
  EXPECT_EQ(full.grid_n, 1025u);
  EXPECT_EQ(full.optics.wavelength_m, 532e-9);
  EXPECT_NEAR(sensor_pitch(full.optics, full.grid()), 2.076e-6, 1e-9);
}
