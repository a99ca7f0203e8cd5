#include "cmrc/data.hpp"

#include "cmrc/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;

namespace cmrc {

void SampleDataset::validate() const {
    std::size_t n = spots.size();
    if (expr.size() != n * n_genes())
        throw DataError("sample '" + sample_id + "': expression matrix has " +
                        std::to_string(expr.size()) + " values, expected " +
                        std::to_string(n * n_genes()));
    if (patches.size() != n * patch_size * patch_size * 3)
        throw DataError("sample '" + sample_id + "': patch count does not match spot count");
    if (marker_flags.size() != gene_names.size())
        throw DataError("sample '" + sample_id + "': marker flags do not match gene names");
    for (const auto& s : spots)
        if (s.patch_index >= n)
            throw DataError("sample '" + sample_id + "': spot '" + s.spot_id +
                            "' has out-of-range patch index");
    std::vector<std::string> sorted = gene_names;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw DataError("sample '" + sample_id + "': duplicate gene names");
}

void SyntheticSpec::validate() const {
    if (marker_count > genes)
        throw ConfigError("SyntheticSpec: marker_count must be <= genes");
    if (latent_dim < 1) throw ConfigError("SyntheticSpec: latent_dim must be >= 1");
    if (n_samples == 0 || spots_per_sample == 0 || genes == 0 || patch_size == 0)
        throw ConfigError("SyntheticSpec: counts must be positive");
    if (noise_sd < 0.0) throw ConfigError("SyntheticSpec: noise_sd must be >= 0");
    if (count_scale <= 0.0) throw ConfigError("SyntheticSpec: count_scale must be > 0");
}

namespace {

float quantize_pixel(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

} // namespace

std::vector<SampleDataset> generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng master(spec.seed);

    std::size_t d = spec.genes, L = spec.latent_dim;

    // gene loadings, shared across samples
    std::vector<double> W(d * L), b(d);
    for (auto& w : W) w = master.normal(0.0, 0.6);
    for (auto& v : b) v = master.normal(0.0, 0.3);

    // rank rows by norm; the largest-norm rows become the marker genes so the
    // image -> expression signal is strongest there
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> norms(d);
    for (std::size_t g = 0; g < d; ++g) {
        double s = 0;
        for (std::size_t l = 0; l < L; ++l) s += W[g * L + l] * W[g * L + l];
        norms[g] = s;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t c) { return norms[a] > norms[c]; });
    std::vector<double> Wsorted(d * L), bsorted(d);
    for (std::size_t g = 0; g < d; ++g) {
        for (std::size_t l = 0; l < L; ++l) Wsorted[g * L + l] = W[order[g] * L + l];
        bsorted[g] = b[order[g]];
    }
    W = std::move(Wsorted);
    b = std::move(bsorted);
    // marker rows made elementwise nonnegative: markers correlate positively
    // with patch brightness (the image map below is also nonnegative)
    for (std::size_t g = 0; g < spec.marker_count; ++g)
        for (std::size_t l = 0; l < L; ++l) W[g * L + l] = std::abs(W[g * L + l]);

    // image map: channel means are affine in z with positive gains
    std::vector<double> A(3 * L);
    for (auto& a : A) a = 0.06 + 0.10 * master.uniform();
    const double base[3] = {0.55, 0.45, 0.5};

    std::vector<SampleDataset> out;
    std::size_t side = static_cast<std::size_t>(std::ceil(std::sqrt(double(spec.spots_per_sample))));
    for (std::size_t s = 0; s < spec.n_samples; ++s) {
        SampleDataset ds;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "sample_%02zu", s);
        ds.sample_id = buf;
        ds.patch_size = spec.patch_size;
        ds.gene_names.reserve(d);
        for (std::size_t g = 0; g < d; ++g) {
            std::snprintf(buf, sizeof(buf), "GENE%03zu", g);
            ds.gene_names.emplace_back(buf);
        }
        ds.marker_flags.assign(d, false);
        for (std::size_t g = 0; g < spec.marker_count; ++g) ds.marker_flags[g] = true;

        Rng rng = master.fork(ds.sample_id);
        std::size_t n = spec.spots_per_sample;
        std::size_t ps = spec.patch_size;
        ds.expr.resize(n * d);
        ds.patches.resize(n * ps * ps * 3);
        ds.spots.resize(n);

        std::vector<double> z(L);
        for (std::size_t i = 0; i < n; ++i) {
            auto& spot = ds.spots[i];
            std::snprintf(buf, sizeof(buf), "spot_%04zu", i);
            spot.spot_id = buf;
            spot.x = static_cast<std::int64_t>(i % side);
            spot.y = static_cast<std::int64_t>(i / side);
            spot.patch_index = i;

            for (auto& v : z) v = rng.normal();

            // expression: counts ~ Poisson(count_scale * exp(clip(Wz + b)))
            double* row = ds.expr_row(i);
            std::size_t best_gene = 0;
            double best_rate = -1.0;
            for (std::size_t g = 0; g < d; ++g) {
                double lin = b[g];
                for (std::size_t l = 0; l < L; ++l) lin += W[g * L + l] * z[l];
                double rate = spec.count_scale * std::exp(std::clamp(lin, -5.0, 5.0));
                if (rate > best_rate) {
                    best_rate = rate;
                    best_gene = g;
                }
                row[g] = static_cast<double>(rng.poisson(rate));
            }
            // an all-zero spot cannot be total-count normalized; give the
            // most strongly expressed gene a single count instead
            bool all_zero = true;
            for (std::size_t g = 0; g < d; ++g)
                if (row[g] != 0.0) {
                    all_zero = false;
                    break;
                }
            if (all_zero) row[best_gene] = 1.0;

            // patch: per-channel mean affine in z, plus a zero-mean
            // checkerboard texture and optional pixel noise
            double ch[3];
            for (std::size_t c = 0; c < 3; ++c) {
                ch[c] = base[c];
                for (std::size_t l = 0; l < L; ++l) ch[c] += A[c * L + l] * z[l];
            }
            double texture = 0.08 * z[0];
            std::size_t tile = std::max<std::size_t>(1, ps / 4);
            float* px = ds.patches.data() + i * ps * ps * 3;
            for (std::size_t y = 0; y < ps; ++y)
                for (std::size_t x = 0; x < ps; ++x) {
                    double checker = (((y / tile) + (x / tile)) % 2 == 0) ? texture : -texture;
                    for (std::size_t c = 0; c < 3; ++c) {
                        double v = ch[c] + checker;
                        if (spec.noise_sd > 0.0) v += rng.normal(0.0, spec.noise_sd);
                        px[(y * ps + x) * 3 + c] = quantize_pixel(v);
                    }
                }
        }
        ds.validate();
        out.push_back(std::move(ds));
    }
    return out;
}

void normalize_total_counts(std::vector<double>& expr, std::size_t n_rows, std::size_t n_genes,
                            double target_sum) {
    if (expr.size() != n_rows * n_genes)
        throw ShapeError("normalize_total_counts: matrix size mismatch");
    if (target_sum <= 0.0) throw ConfigError("normalize_total_counts: target_sum must be > 0");

    bool already = n_rows > 0;
    for (std::size_t r = 0; r < n_rows; ++r) {
        double sum = 0.0;
        for (std::size_t g = 0; g < n_genes; ++g) {
            double v = expr[r * n_genes + g];
            if (v < 0.0)
                throw ContractError("normalize_total_counts: negative entry in row " +
                                    std::to_string(r));
            sum += v;
        }
        if (sum == 0.0)
            throw DataError("normalize_total_counts: spot " + std::to_string(r) +
                            " has an all-zero expression row");
        if (std::abs(sum - target_sum) > 1e-6 * target_sum) already = false;
        double f = target_sum / sum;
        for (std::size_t g = 0; g < n_genes; ++g) expr[r * n_genes + g] *= f;
    }
    if (already)
        std::cerr << "warning: normalize_total_counts applied to already-normalized data\n";
}

void log_transform(std::vector<double>& expr) {
    for (auto& v : expr) {
        if (v < 0.0) throw ContractError("log_transform: negative entry");
        v = std::log1p(v);
    }
}

void preprocess(SampleDataset& sample, double target_sum) {
    normalize_total_counts(sample.expr, sample.n_spots(), sample.n_genes(), target_sum);
    log_transform(sample.expr);
}

std::vector<std::size_t> select_hvgs(const std::vector<double>& expr, std::size_t n_rows,
                                     std::size_t n_genes, std::size_t k) {
    if (k < 1) throw ContractError("select_hvgs: k must be >= 1");
    if (n_rows == 0) throw ContractError("select_hvgs: empty matrix");
    std::vector<double> var(n_genes, 0.0);
    for (std::size_t g = 0; g < n_genes; ++g) {
        double mean = 0.0;
        for (std::size_t r = 0; r < n_rows; ++r) mean += expr[r * n_genes + g];
        mean /= double(n_rows);
        double acc = 0.0;
        for (std::size_t r = 0; r < n_rows; ++r) {
            double d = expr[r * n_genes + g] - mean;
            acc += d * d;
        }
        var[g] = acc / double(n_rows);
    }
    std::vector<std::size_t> idx(n_genes);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (var[a] != var[b]) return var[a] > var[b];
        return a < b;
    });
    if (k < idx.size()) idx.resize(k);
    return idx;
}

std::vector<std::size_t> select_hegs(const std::vector<double>& expr, std::size_t n_rows,
                                     std::size_t n_genes,
                                     const std::vector<std::size_t>& hvg_indices,
                                     std::size_t k) {
    if (hvg_indices.empty()) throw ContractError("select_hegs: hvg_indices must be nonempty");
    if (n_rows == 0) throw ContractError("select_hegs: empty matrix");
    std::vector<std::size_t> idx = hvg_indices;
    std::vector<double> mean(n_genes, 0.0);
    for (std::size_t g : idx) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n_rows; ++r) acc += expr[r * n_genes + g];
        mean[g] = acc / double(n_rows);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (mean[a] != mean[b]) return mean[a] > mean[b];
        return a < b;
    });
    if (k < idx.size()) idx.resize(k);
    return idx;
}

std::vector<std::size_t> hvg_union(const std::vector<const SampleDataset*>& samples,
                                   std::size_t k) {
    std::vector<std::size_t> result;
    std::vector<bool> seen;
    for (const auto* s : samples) {
        if (seen.empty()) seen.assign(s->n_genes(), false);
        auto top = select_hvgs(s->expr, s->n_spots(), s->n_genes(), k);
        for (std::size_t g : top)
            if (!seen[g]) {
                seen[g] = true;
                result.push_back(g);
            }
    }
    return result;
}

namespace {

void flip_horizontal(float* p, std::size_t n) {
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n / 2; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                std::swap(p[(y * n + x) * 3 + c], p[(y * n + n - 1 - x) * 3 + c]);
}

void flip_vertical(float* p, std::size_t n) {
    for (std::size_t y = 0; y < n / 2; ++y)
        for (std::size_t x = 0; x < n; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                std::swap(p[(y * n + x) * 3 + c], p[((n - 1 - y) * n + x) * 3 + c]);
}

// 90 degrees counterclockwise: out[y][x] = in[x][n-1-y]
void rotate90(float* p, std::size_t n) {
    std::vector<float> tmp(p, p + n * n * 3);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                p[(y * n + x) * 3 + c] = tmp[(x * n + (n - 1 - y)) * 3 + c];
}

} // namespace

void augment_patch(float* patch, std::size_t size, Rng& rng) {
    if (rng.bernoulli(0.5)) flip_horizontal(patch, size);
    if (rng.bernoulli(0.5)) flip_vertical(patch, size);
    std::uint64_t quarter_turns = rng.uniform_index(4);
    for (std::uint64_t i = 0; i < quarter_turns; ++i) rotate90(patch, size);
}

FoldPlan make_folds(const std::vector<SampleDataset>& samples) {
    if (samples.size() < 2)
        throw ConfigError("make_folds: cross-validation requires at least 2 samples, got " +
                          std::to_string(samples.size()));
    FoldPlan plan;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        FoldPlan::Fold fold;
        fold.test_sample_id = samples[i].sample_id;
        for (std::size_t j = 0; j < samples.size(); ++j)
            if (j != i) fold.train_sample_ids.push_back(samples[j].sample_id);
        plan.folds.push_back(std::move(fold));
    }
    return plan;
}

// ---------------------------------------------------------------------------
// on-disk layout

namespace {

constexpr char kPatchMagic[4] = {'C', 'M', 'R', 'P'};
constexpr std::uint32_t kPatchVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    std::uint8_t b[4] = {std::uint8_t(v), std::uint8_t(v >> 8), std::uint8_t(v >> 16),
                         std::uint8_t(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, const std::string& ctx) {
    std::uint8_t b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw DataError(ctx + ": truncated while reading a u32 field");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

double parse_double(const std::string& s, const std::string& ctx) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw DataError(ctx + ": cannot parse number '" + s + "'");
    return v;
}

std::int64_t parse_int(const std::string& s, const std::string& ctx) {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw DataError(ctx + ": cannot parse integer '" + s + "'");
    return v;
}

void save_sample(const SampleDataset& ds, const fs::path& dir) {
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "genes.txt");
        for (std::size_t g = 0; g < ds.n_genes(); ++g) {
            os << ds.gene_names[g];
            if (ds.marker_flags[g]) os << "\tMARKER";
            os << "\n";
        }
    }
    {
        std::ofstream os(dir / "spots.csv");
        os << "spot_id,x,y,patch_index\n";
        for (const auto& s : ds.spots)
            os << s.spot_id << "," << s.x << "," << s.y << "," << s.patch_index << "\n";
    }
    {
        std::ofstream os(dir / "expr.csv");
        for (std::size_t g = 0; g < ds.n_genes(); ++g) {
            if (g) os << ",";
            os << ds.gene_names[g];
        }
        os << "\n";
        for (std::size_t r = 0; r < ds.n_spots(); ++r) {
            const double* row = ds.expr_row(r);
            for (std::size_t g = 0; g < ds.n_genes(); ++g) {
                if (g) os << ",";
                os << format_double(row[g]);
            }
            os << "\n";
        }
    }
    {
        std::ofstream os(dir / "patches.bin", std::ios::binary);
        os.write(kPatchMagic, 4);
        write_u32(os, kPatchVersion);
        write_u32(os, std::uint32_t(ds.n_spots()));
        write_u32(os, std::uint32_t(ds.patch_size));
        write_u32(os, std::uint32_t(ds.patch_size));
        write_u32(os, 3);
        std::vector<std::uint8_t> bytes(ds.patches.size());
        for (std::size_t i = 0; i < bytes.size(); ++i)
            bytes[i] = static_cast<std::uint8_t>(std::lround(ds.patches[i] * 255.0f));
        os.write(reinterpret_cast<const char*>(bytes.data()),
                 static_cast<std::streamsize>(bytes.size()));
    }
}

SampleDataset load_sample(const fs::path& dir) {
    SampleDataset ds;
    ds.sample_id = dir.filename().string();

    const fs::path genes_path = dir / "genes.txt";
    std::ifstream genes(genes_path);
    if (!genes) throw DataError(genes_path.string() + ": cannot open");
    std::string line;
    while (std::getline(genes, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos) {
            ds.gene_names.push_back(line);
            ds.marker_flags.push_back(false);
        } else {
            std::string flag = line.substr(tab + 1);
            if (flag != "MARKER")
                throw DataError(genes_path.string() + ": unknown gene flag '" + flag + "'");
            ds.gene_names.push_back(line.substr(0, tab));
            ds.marker_flags.push_back(true);
        }
    }
    if (ds.gene_names.empty()) throw DataError(genes_path.string() + ": no genes listed");
    std::size_t d = ds.gene_names.size();

    const fs::path spots_path = dir / "spots.csv";
    std::ifstream spots(spots_path);
    if (!spots) throw DataError(spots_path.string() + ": cannot open");
    if (!std::getline(spots, line) || (line != "spot_id,x,y,patch_index" &&
                                       line != "spot_id,x,y,patch_index\r"))
        throw DataError(spots_path.string() + ": malformed header");
    std::size_t lineno = 1;
    while (std::getline(spots, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != 4)
            throw DataError(spots_path.string() + ":" + std::to_string(lineno) +
                            ": expected 4 fields, got " + std::to_string(f.size()));
        SpotRecord rec;
        rec.spot_id = f[0];
        rec.x = parse_int(f[1], spots_path.string() + ":" + std::to_string(lineno));
        rec.y = parse_int(f[2], spots_path.string() + ":" + std::to_string(lineno));
        rec.patch_index = static_cast<std::size_t>(
            parse_int(f[3], spots_path.string() + ":" + std::to_string(lineno)));
        ds.spots.push_back(std::move(rec));
    }

    const fs::path expr_path = dir / "expr.csv";
    std::ifstream expr(expr_path);
    if (!expr) throw DataError(expr_path.string() + ": cannot open");
    if (!std::getline(expr, line)) throw DataError(expr_path.string() + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto header = split_csv_line(line);
    if (header != ds.gene_names)
        throw DataError(expr_path.string() + ": header does not match genes.txt");
    ds.expr.reserve(ds.spots.size() * d);
    lineno = 1;
    while (std::getline(expr, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != d)
            throw DataError(expr_path.string() + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(d) + " values, got " + std::to_string(f.size()));
        for (const auto& v : f) {
            double x = parse_double(v, expr_path.string() + ":" + std::to_string(lineno));
            if (x < 0.0)
                throw DataError(expr_path.string() + ":" + std::to_string(lineno) +
                                ": negative expression value");
            ds.expr.push_back(x);
        }
    }
    if (ds.expr.size() != ds.spots.size() * d)
        throw DataError(expr_path.string() + ": " + std::to_string(ds.expr.size() / d) +
                        " expression rows but " + std::to_string(ds.spots.size()) +
                        " spots in spots.csv");

    const fs::path patch_path = dir / "patches.bin";
    std::ifstream pk(patch_path, std::ios::binary);
    if (!pk) throw DataError(patch_path.string() + ": missing patch pack");
    char magic[4];
    if (!pk.read(magic, 4) || std::memcmp(magic, kPatchMagic, 4) != 0)
        throw DataError(patch_path.string() + ": bad magic at offset 0");
    std::uint32_t version = read_u32(pk, patch_path.string());
    if (version != kPatchVersion)
        throw DataError(patch_path.string() + ": unsupported version " + std::to_string(version));
    std::uint32_t count = read_u32(pk, patch_path.string());
    std::uint32_t H = read_u32(pk, patch_path.string());
    std::uint32_t W = read_u32(pk, patch_path.string());
    std::uint32_t C = read_u32(pk, patch_path.string());
    if (C != 3) throw DataError(patch_path.string() + ": expected 3 channels");
    if (H != W) throw DataError(patch_path.string() + ": patches must be square");
    if (count != ds.spots.size())
        throw DataError(patch_path.string() + ": " + std::to_string(count) + " patches but " +
                        std::to_string(ds.spots.size()) + " spots");
    ds.patch_size = H;
    std::size_t n_bytes = std::size_t(count) * H * W * C;
    std::vector<std::uint8_t> bytes(n_bytes);
    if (!pk.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n_bytes)))
        throw DataError(patch_path.string() + ": truncated pixel data (expected " +
                        std::to_string(n_bytes) + " bytes at offset 24)");
    if (pk.peek() != EOF)
        throw DataError(patch_path.string() + ": trailing bytes after pixel data");
    ds.patches.resize(n_bytes);
    for (std::size_t i = 0; i < n_bytes; ++i) ds.patches[i] = bytes[i] / 255.0f;

    ds.validate();
    return ds;
}

} // namespace

void save_dataset(const std::vector<SampleDataset>& datasets, const fs::path& dir) {
    fs::create_directories(dir);
    for (const auto& ds : datasets) save_sample(ds, dir / ds.sample_id);
}

std::vector<SampleDataset> load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError(dir.string() + ": not a directory");
    std::vector<fs::path> sample_dirs;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory()) sample_dirs.push_back(entry.path());
    std::sort(sample_dirs.begin(), sample_dirs.end());
    if (sample_dirs.empty()) throw DataError(dir.string() + ": no samples found");
    std::vector<SampleDataset> out;
    out.reserve(sample_dirs.size());
    for (const auto& p : sample_dirs) out.push_back(load_sample(p));
    return out;
}

} // namespace cmrc
