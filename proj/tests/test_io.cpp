#include <gtest/gtest.h>

#include <fstream>

#include "cloak/checkpoint.hpp"
#include "cloak/errors.hpp"
#include "cloak/io.hpp"
#include "test_support.hpp"

namespace cloak {
namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.image_size = 8;
    c.base_channels = 4;
    c.mid_channels = 8;
    c.embed_dim = 8;
    c.time_dim = 8;
    c.groups = 2;
    return c;
}

void flip_byte(const fs::path& p, std::streamoff offset) {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(offset);
    char c = 0;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x01);
    f.seekp(offset);
    f.write(&c, 1);
}

TEST(Sha256, KnownVector) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Png, RoundTripWithinQuantisationAndText) {
    const auto dir = testing::temp_dir("png");
    Tensor img = testing::random_tensor({3, 5, 4}, 2, 0.6);
    img[0] = 3.0;  // clipped on write
    write_png(dir / "a.png", img, {{"config_hash", "h1"}, {"note", "x y"}});
    const Tensor back = read_png(dir / "a.png");
    ASSERT_EQ(back.shape(), img.shape());
    EXPECT_EQ(back[0], 1.0);
    for (std::size_t i = 1; i < img.numel(); ++i) {
        EXPECT_EQ(back[i], quantize16(img[i]));
        EXPECT_NEAR(back[i], std::clamp(img[i], -1.0, 1.0), 1.0 / 65535.0 + 1e-12);
    }
    const PngText text = read_png_text(dir / "a.png");
    EXPECT_EQ(text.at("config_hash"), "h1");
    EXPECT_EQ(text.at("note"), "x y");
    EXPECT_EQ(quantize16(quantize16(0.123)), quantize16(0.123));
    std::filesystem::remove_all(dir);
}

TEST(Archive, BitwiseRoundTripAndTamperDetection) {
    const auto dir = testing::temp_dir("archive");
    ArrayMap arrays{{"w", testing::random_tensor({3, 4}, 1)}, {"b", Tensor({2}, {1e-300, -0.0})}};
    const ArchiveManifest m = save_archive(dir / "x", arrays, "cfg", {{"kind", "test"}});
    EXPECT_EQ(m.digest, arrays_digest(arrays));
    ArchiveManifest loaded_manifest;
    const ArrayMap back = load_archive(dir / "x", &loaded_manifest);
    ASSERT_EQ(back.size(), 2u);
    for (const auto& [name, t] : arrays) EXPECT_TRUE(identical(t, back.at(name))) << name;
    EXPECT_TRUE(std::signbit(back.at("b")[1]));
    EXPECT_EQ(loaded_manifest.config_hash, "cfg");
    EXPECT_EQ(loaded_manifest.meta.at("kind"), "test");

    flip_byte(dir / "x.bin", 5);
    EXPECT_THROW(load_archive(dir / "x"), IntegrityError);
    std::filesystem::remove_all(dir);
}

TEST(Archive, DigestSeesNamesShapesAndValues) {
    const Tensor t = testing::random_tensor({2, 3}, 4);
    const std::string d = arrays_digest({{"a", t}});
    EXPECT_NE(d, arrays_digest({{"b", t}}));
    EXPECT_NE(d, arrays_digest({{"a", t.reshaped({3, 2})}}));
    Tensor u = t;
    u[5] = std::nextafter(u[5], 10.0);
    EXPECT_NE(d, arrays_digest({{"a", u}}));
}

TEST(Checkpoint, ModelRoundTripIsBitwise) {
    const auto dir = testing::temp_dir("model_ckpt");
    const DiffusionModel m = DiffusionModel::create(tiny_config(), build_linear_schedule());
    save_model(dir / "base", m, "h");
    const DiffusionModel back = load_model(dir / "base");
    EXPECT_EQ(model_digest(back), model_digest(m));
    EXPECT_EQ(back.config.base_channels, 4);
    const Tensor x = testing::random_tensor({1, 3, 8, 8}, 3);
    const Tensor p = m.encode("a photo of sks person").matrix;
    EXPECT_TRUE(identical(m.unet.predict(ag::constant(x), 10, ag::constant(p), false).noise.value(),
                          back.unet.predict(ag::constant(x), 10, ag::constant(p), false).noise.value()));
    flip_byte(dir / "base.bin", 100);
    EXPECT_THROW(load_model(dir / "base"), IntegrityError);
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, ApvAndTiRoundTrip) {
    const auto dir = testing::temp_dir("small_ckpt");
    APVState apv;
    apv.embedding.matrix = testing::random_tensor({4, 8}, 5);
    apv.iterations_done = 7;
    apv.lr = 0.01;
    apv.seed = 99;
    apv.losses = {0.1, 0.2};
    save_apv(dir / "apv", apv, "h");
    const APVState a = load_apv(dir / "apv");
    EXPECT_TRUE(identical(a.embedding.matrix, apv.embedding.matrix));
    EXPECT_EQ(a.iterations_done, 7);
    EXPECT_EQ(a.lr, 0.01);
    EXPECT_EQ(a.seed, 99u);
    EXPECT_EQ(a.losses, apv.losses);

    TIEmbedding ti{5, testing::random_tensor({8}, 6)};
    save_ti(dir / "ti", ti, "h");
    const TIEmbedding t = load_ti(dir / "ti");
    EXPECT_EQ(t.token_id, 5);
    EXPECT_TRUE(identical(t.row, ti.row));
    std::filesystem::remove_all(dir);
}

TEST(ImageBatchFiles, ExactValuesSurviveAlongsidePngs) {
    const auto dir = testing::temp_dir("batch");
    const ImageBatch b{testing::random_tensor({2, 3, 4, 4}, 8, 0.3), {4, 4}};
    write_image_batch(dir, "prot", b, "h", {{"variant", "dadiff"}});
    EXPECT_TRUE(fs::exists(dir / "prot_000.png"));
    EXPECT_TRUE(fs::exists(dir / "prot_001.png"));
    const ImageBatch back = read_image_batch(dir, "prot");
    EXPECT_TRUE(identical(back.pixels, b.pixels));
    EXPECT_EQ(back.labels, b.labels);
    std::filesystem::remove_all(dir);
}

TEST(Csv, QuotingAndSplitting) {
    const std::vector<std::string> fields = {"plain", "a,b", "say \"hi\"", ""};
    const std::string row = csv_row(fields);
    EXPECT_EQ(row, "plain,\"a,b\",\"say \"\"hi\"\"\",");
    EXPECT_EQ(csv_split(row, 1), fields);
    try {
        csv_split("x,\"open", 9);
        FAIL() << "unterminated quote accepted";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line, 9);
    }
}

TEST(FormatDouble, ShortestRoundTrip) {
    EXPECT_EQ(format_double(0.1), "0.1");
    EXPECT_EQ(format_double(2.0), "2");
    for (double v : {1.0 / 3.0, 1e-300, -123456.789, 5e-324})
        EXPECT_EQ(std::strtod(format_double(v).c_str(), nullptr), v) << format_double(v);
}

}  // namespace
}  // namespace cloak
